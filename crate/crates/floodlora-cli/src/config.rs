//! Config resolution: struct defaults ← JSON config file ← dotted `--set`
//! overrides ← explicit CLI flags. The fully resolved config is echoed into
//! the output directory so any run can be reproduced from it.

use std::path::Path;

use floodlora::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Deep-merge `patch` into `base` (objects merge, everything else replaces).
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(patch_map)) => {
            for (k, v) in patch_map {
                match base_map.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base_map.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `dotted.key=value` override. Values parse as JSON when
/// possible (numbers, booleans, null), otherwise as strings.
fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {spec:?}")))?;
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut slot = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = slot
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("--set {path}: {part} is not an object")))?;
        if i == parts.len() - 1 {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        slot = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Resolve a config: defaults, then the optional JSON file, then `--set`
/// overrides. Unknown keys are rejected by the target type.
pub fn resolve<T>(defaults: &T, config_path: Option<&Path>, sets: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(defaults)
        .map_err(|e| Error::Usage(format!("config defaults do not serialize: {e}")))?;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
        merge(&mut value, patch);
    }
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Usage(format!("invalid config: {e}")))
}

/// Write the resolved config into `out/config.resolved.json`.
pub fn echo_resolved<T: Serialize>(out_dir: &Path, config: &T) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("config.resolved.json");
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Usage(format!("config does not serialize: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
