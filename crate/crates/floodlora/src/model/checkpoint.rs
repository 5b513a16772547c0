//! Model checkpoints: JSON manifest + named raw `f64` little-endian weight
//! records in stable (insertion) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, SegModel, Strategy};
use crate::error::{Error, Result};
use crate::lora::InitMode;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::wire;

const MAGIC: &[u8; 4] = b"FLCK";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum CheckpointKind {
    FullModel,
    EncoderOnly,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: CheckpointKind,
    config: EncoderConfig,
    strategy: Option<Strategy>,
    init_mode: InitMode,
    seed: u64,
    records: Vec<RecordMeta>,
}

fn write_records(
    path: &Path,
    manifest: &Manifest,
    tensors: &[&Tensor],
) -> Result<()> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    wire::write_u16(&mut w, VERSION, path)?;
    wire::write_u32(&mut w, json.len() as u32, path)?;
    w.write_all(&json).map_err(|e| Error::io(path, e))?;
    for t in tensors {
        wire::write_f64_slice(&mut w, t.data(), path)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_manifest(r: &mut BufReader<File>, path: &Path) -> Result<Manifest> {
    wire::expect_magic(r, MAGIC, path)?;
    let version = wire::read_u16(r, path, "version")?;
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let len = wire::read_u32(r, path, "manifest length")? as usize;
    let mut json = vec![0u8; len];
    wire::read_exact(r, &mut json, path, "manifest")?;
    serde_json::from_slice(&json).map_err(|e| Error::corrupt(path, format!("manifest: {e}")))
}

/// Write the whole model (all parameters, adapters included).
pub fn save_model(path: &Path, model: &SegModel) -> Result<()> {
    let (records, tensors): (Vec<_>, Vec<_>) = model
        .params
        .ids()
        .map(|id| {
            let t = model.params.get(id);
            (
                RecordMeta {
                    name: model.params.name(id).to_string(),
                    shape: t.shape().to_vec(),
                },
                t,
            )
        })
        .unzip();
    let manifest = Manifest {
        kind: CheckpointKind::FullModel,
        config: model.encoder.cfg,
        strategy: Some(model.strategy),
        init_mode: model.init_mode,
        seed: model.seed,
        records,
    };
    write_records(path, &manifest, &tensors)
}

/// Rebuild a model saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<SegModel> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let manifest = read_manifest(&mut r, path)?;
    if manifest.kind != CheckpointKind::FullModel {
        return Err(Error::Usage(format!(
            "{} is an encoder-only checkpoint; a full model checkpoint is required",
            path.display()
        )));
    }
    let strategy = manifest
        .strategy
        .ok_or_else(|| Error::corrupt(path, "full model checkpoint missing strategy"))?;
    let mut model = SegModel::new(manifest.config, strategy, manifest.init_mode, manifest.seed)?;
    if manifest.records.len() != model.params.len() {
        return Err(Error::corrupt(
            path,
            format!(
                "{} records but the configured model has {} parameters",
                manifest.records.len(),
                model.params.len()
            ),
        ));
    }
    for (meta, id) in manifest.records.iter().zip(model.params.ids().collect::<Vec<_>>()) {
        if meta.name != model.params.name(id) {
            return Err(Error::corrupt(
                path,
                format!(
                    "record {} does not match expected parameter {}",
                    meta.name,
                    model.params.name(id)
                ),
            ));
        }
        let expect_shape = model.params.get(id).shape().to_vec();
        if meta.shape != expect_shape {
            return Err(Error::corrupt(
                path,
                format!("{}: shape {:?} ≠ expected {:?}", meta.name, meta.shape, expect_shape),
            ));
        }
        let n: usize = meta.shape.iter().product();
        let data = wire::read_f64_vec(&mut r, n, path, &meta.name)?;
        let flag = model.params.get(id).requires_grad;
        *model.params.get_mut(id) = Tensor::new(meta.shape.clone(), data)?.with_requires_grad(flag);
    }
    Ok(model)
}

/// Write only the plain encoder weights (no adapters) — the artifact of
/// masked-autoencoder pretraining.
pub fn save_encoder(path: &Path, model: &SegModel) -> Result<()> {
    let (records, tensors): (Vec<_>, Vec<_>) = model
        .params
        .ids()
        .filter(|id| {
            let name = model.params.name(*id);
            name.starts_with("encoder.") && !name.contains(".lora_")
        })
        .map(|id| {
            let t = model.params.get(id);
            (
                RecordMeta {
                    name: model.params.name(id).to_string(),
                    shape: t.shape().to_vec(),
                },
                t,
            )
        })
        .unzip();
    let manifest = Manifest {
        kind: CheckpointKind::EncoderOnly,
        config: model.encoder.cfg,
        strategy: None,
        init_mode: model.init_mode,
        seed: model.seed,
        records,
    };
    write_records(path, &manifest, &tensors)
}

/// Read encoder weights into a standalone store for
/// [`ParamStore::load_matching`]; also returns the config they were trained
/// under so callers can reject mismatches.
pub fn load_encoder_weights(path: &Path) -> Result<(EncoderConfig, ParamStore)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let manifest = read_manifest(&mut r, path)?;
    let mut store = ParamStore::new();
    for meta in &manifest.records {
        let n: usize = meta.shape.iter().product();
        let data = wire::read_f64_vec(&mut r, n, path, &meta.name)?;
        store.insert(&meta.name, Tensor::new(meta.shape.clone(), data)?);
    }
    Ok((manifest.config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Strategy;
    use crate::rng::{stream, stream_rng};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 1,
            patch_size: 8,
            in_channels: 4,
            image_size: 16,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn model_roundtrip_preserves_weights_and_strategy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.flck");
        let model = SegModel::new(
            tiny(),
            Strategy::Lora { rank: 2, alpha: 4.0, dropout: 0.1 },
            InitMode::BothRandom,
            7,
        )
        .unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.strategy, model.strategy);
        assert_eq!(back.params.len(), model.params.len());
        for (a, b) in model.params.ids().zip(back.params.ids()) {
            assert_eq!(model.params.get(a).data(), back.params.get(b).data());
            assert_eq!(
                model.params.get(a).requires_grad,
                back.params.get(b).requires_grad
            );
        }
        // Same predictions.
        let mut rng = stream_rng(9, stream::SYNTH);
        let pre = Tensor::rand_uniform(vec![1, 4, 16, 16], -1.0, 1.0, &mut rng);
        let post = Tensor::rand_uniform(vec![1, 4, 16, 16], -1.0, 1.0, &mut rng);
        assert_eq!(
            model.infer(&pre, &post).unwrap().data(),
            back.infer(&pre, &post).unwrap().data()
        );
    }

    #[test]
    fn encoder_only_checkpoint_excludes_adapters_and_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.flck");
        let model = SegModel::new(
            tiny(),
            Strategy::Lora { rank: 2, alpha: 4.0, dropout: 0.1 },
            InitMode::BothRandom,
            3,
        )
        .unwrap();
        save_encoder(&path, &model).unwrap();
        let (cfg, store) = load_encoder_weights(&path).unwrap();
        assert_eq!(cfg, tiny());
        assert!(store.len() > 0);
        for id in store.ids() {
            let name = store.name(id);
            assert!(name.starts_with("encoder.") && !name.contains(".lora_"));
        }
        // Loading an encoder checkpoint as a full model is a usage error.
        assert!(matches!(load_model(&path), Err(Error::Usage(_))));
    }

    #[test]
    fn truncated_checkpoint_reports_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.flck");
        let model = SegModel::new(tiny(), Strategy::Frozen, InitMode::ZeroB, 1).unwrap();
        save_model(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Corrupt { .. })));
    }
}
