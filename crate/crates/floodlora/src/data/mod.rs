//! Dataset container: manifest, lazy sample access, batching.
//!
//! Layout on disk: `<root>/manifest.json` plus
//! `<root>/samples/<id>.{pre,post,mask}.fseg`. Rasters store raw `f32`
//! backscatter; normalization stats live in the manifest (train split only)
//! and are applied when samples materialize.

pub mod fseg;
pub mod synth;

pub use synth::{generate_synthetic, Regime, SynthConfig};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;

/// Channels per snapshot: VV/VH × ascending/descending.
pub const CHANNELS_PER_SNAPSHOT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }

    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Ood];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            other => Err(Error::Usage(format!(
                "unknown split {other:?} (expected train|val|test|ood)"
            ))),
        }
    }
}

/// One pre/post scene pair with its binary flood mask, normalized.
#[derive(Debug, Clone)]
pub struct FloodSample {
    pub id: String,
    pub split: Split,
    /// `[4, H, W]`, channel order vv_asc, vh_asc, vv_desc, vh_desc.
    pub pre: Tensor,
    pub post: Tensor,
    /// `[H, W]`, values exactly 0 or 1.
    pub mask: Tensor,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    /// 8 channel names: pre then post, vv/vh × asc/desc each.
    pub channel_names: Vec<String>,
    pub samples: Vec<SampleRecord>,
    /// Per-channel normalization stats computed over the train split.
    pub stats: Vec<ChannelStats>,
}

impl DatasetManifest {
    pub fn default_channel_names() -> Vec<String> {
        let mut names = Vec::with_capacity(8);
        for snap in ["pre", "post"] {
            for orbit in ["asc", "desc"] {
                for pol in ["vv", "vh"] {
                    names.push(format!("{snap}_{pol}_{orbit}"));
                }
            }
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_names.len() != 2 * CHANNELS_PER_SNAPSHOT {
            return Err(Error::Validation(format!(
                "manifest must name {} channels, got {}",
                2 * CHANNELS_PER_SNAPSHOT,
                self.channel_names.len()
            )));
        }
        if self.stats.len() != 2 * CHANNELS_PER_SNAPSHOT {
            return Err(Error::Validation(format!(
                "manifest must carry stats for all {} channels, got {}",
                2 * CHANNELS_PER_SNAPSHOT,
                self.stats.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// On-disk dataset; samples materialize on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::corrupt(&path, format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(Dataset {
            manifest,
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.clone())
            .collect()
    }

    fn record(&self, id: &str) -> Result<&SampleRecord> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Usage(format!("sample {id} not in manifest")))
    }

    fn sample_path(&self, id: &str, part: &str) -> PathBuf {
        self.root.join("samples").join(format!("{id}.{part}.fseg"))
    }

    /// Raw stored values, bitwise as written (no normalization).
    pub fn load_raw(&self, id: &str) -> Result<(Vec<f32>, Vec<f32>, Vec<u8>)> {
        self.record(id)?;
        let size = self.manifest.image_size;
        let read_snap = |part: &str| -> Result<Vec<f32>> {
            let path = self.sample_path(id, part);
            let (header, data) = fseg::read_raster(&path)
                .map_err(|e| annotate_sample(e, id))?;
            if header.channels != CHANNELS_PER_SNAPSHOT
                || header.height != size
                || header.width != size
            {
                return Err(Error::corrupt(
                    &path,
                    format!(
                        "sample {id}: raster is {}×{}×{}, manifest says {}×{size}×{size}",
                        header.channels, header.height, header.width, CHANNELS_PER_SNAPSHOT
                    ),
                ));
            }
            Ok(data)
        };
        let pre = read_snap("pre")?;
        let post = read_snap("post")?;
        let mask_path = self.sample_path(id, "mask");
        let (header, mask) =
            fseg::read_mask(&mask_path).map_err(|e| annotate_sample(e, id))?;
        if header.height != size || header.width != size {
            return Err(Error::corrupt(
                &mask_path,
                format!("sample {id}: mask extent mismatch"),
            ));
        }
        Ok((pre, post, mask))
    }

    /// Materialize one sample, normalized by the manifest stats.
    pub fn load_sample(&self, id: &str) -> Result<FloodSample> {
        let split = self.record(id)?.split;
        let (pre_raw, post_raw, mask_raw) = self.load_raw(id)?;
        let size = self.manifest.image_size;
        let plane = size * size;

        let normalize = |raw: &[f32], stats: &[ChannelStats]| -> Vec<f64> {
            let mut out = Vec::with_capacity(raw.len());
            for (c, stat) in stats.iter().enumerate() {
                for v in &raw[c * plane..(c + 1) * plane] {
                    out.push((f64::from(*v) - stat.mean) / stat.std);
                }
            }
            out
        };
        let pre = Tensor::new(
            vec![CHANNELS_PER_SNAPSHOT, size, size],
            normalize(&pre_raw, &self.manifest.stats[..CHANNELS_PER_SNAPSHOT]),
        )?;
        let post = Tensor::new(
            vec![CHANNELS_PER_SNAPSHOT, size, size],
            normalize(&post_raw, &self.manifest.stats[CHANNELS_PER_SNAPSHOT..]),
        )?;
        let mask = Tensor::new(
            vec![size, size],
            mask_raw.iter().map(|&m| f64::from(m)).collect(),
        )?;
        Ok(FloodSample {
            id: id.to_string(),
            split,
            pre,
            post,
            mask,
        })
    }

    /// Materialize a whole split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<FloodSample>> {
        let ids = self.ids(split);
        if ids.is_empty() {
            return Err(Error::Usage(format!("split {split} is empty")));
        }
        ids.iter().map(|id| self.load_sample(id)).collect()
    }
}

fn annotate_sample(err: Error, id: &str) -> Error {
    match err {
        Error::Corrupt { path, reason } => Error::Corrupt {
            path,
            reason: format!("sample {id}: {reason}"),
        },
        Error::Io { path, source } => Error::Io {
            path: PathBuf::from(format!("{} (sample {id})", path.display())),
            source,
        },
        other => other,
    }
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[b, 4, H, W]`
    pub pre: Tensor,
    pub post: Tensor,
    /// `[b, 1, H, W]`
    pub target: Tensor,
}

/// Index order for one epoch: seeded shuffle when `shuffle_seed` is set,
/// stable order otherwise; the final partial batch is kept.
pub fn batch_plan(
    n_samples: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Vec<usize>>> {
    if n_samples == 0 {
        return Err(Error::Usage("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = stream_rng(seed, stream::SHUFFLE);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stack samples into batch tensors.
pub fn stack_batch(samples: &[&FloodSample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot stack an empty batch".into()));
    }
    let shape = samples[0].pre.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let b = samples.len();
    let mut pre = Vec::with_capacity(b * c * h * w);
    let mut post = Vec::with_capacity(b * c * h * w);
    let mut target = Vec::with_capacity(b * h * w);
    let mut ids = Vec::with_capacity(b);
    for s in samples {
        if s.pre.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                lhs: shape,
                rhs: s.pre.shape().to_vec(),
            });
        }
        pre.extend_from_slice(s.pre.data());
        post.extend_from_slice(s.post.data());
        target.extend_from_slice(s.mask.data());
        ids.push(s.id.clone());
    }
    Ok(Batch {
        ids,
        pre: Tensor::new(vec![b, c, h, w], pre)?,
        post: Tensor::new(vec![b, c, h, w], post)?,
        target: Tensor::new(vec![b, 1, h, w], target)?,
    })
}

/// Load a split and stream it as batches. Train-style shuffling happens iff
/// `shuffle_seed` is set.
pub fn split_iter(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    let samples = dataset.load_split(split)?;
    let plan = batch_plan(samples.len(), batch_size, shuffle_seed)?;
    plan.iter()
        .map(|idxs| {
            let refs: Vec<&FloodSample> = idxs.iter().map(|&i| &samples[i]).collect();
            stack_batch(&refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(seed: u64) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 16,
            n_train: 10,
            n_val: 3,
            n_test: 3,
            n_ood: 3,
            seed,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn roundtrip_raw_values_are_bitwise() {
        let (dir, ds) = tiny_dataset(1);
        let regen = synth::generate_all(&SynthConfig {
            image_size: 16,
            n_train: 10,
            n_val: 3,
            n_test: 3,
            n_ood: 3,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        for sample in &regen {
            let (pre, post, mask) = ds.load_raw(&sample.id).unwrap();
            assert_eq!(
                pre.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                sample.pre.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(
                post.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                sample.post.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(mask, sample.mask);
        }
        drop(dir);
    }

    #[test]
    fn normalized_train_channels_are_roughly_standard() {
        let (_dir, ds) = tiny_dataset(2);
        let samples = ds.load_split(Split::Train).unwrap();
        let plane = 16 * 16;
        for c in 0..CHANNELS_PER_SNAPSHOT {
            let mut sum = 0.0;
            let mut n = 0;
            for s in &samples {
                for v in &s.pre.data()[c * plane..(c + 1) * plane] {
                    sum += v;
                    n += 1;
                }
            }
            let mean: f64 = sum / n as f64;
            assert!(mean.abs() < 0.05, "channel {c} mean {mean} after normalization");
        }
    }

    #[test]
    fn split_filtering_returns_only_that_split() {
        let (_dir, ds) = tiny_dataset(3);
        let val = ds.load_split(Split::Val).unwrap();
        assert_eq!(val.len(), 3);
        assert!(val.iter().all(|s| s.split == Split::Val && s.id.starts_with("val-")));
    }

    #[test]
    fn truncated_raster_names_the_sample() {
        let (dir, ds) = tiny_dataset(4);
        let victim = dir.path().join("samples").join("train-0001.pre.fseg");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 10]).unwrap();
        let err = ds.load_sample("train-0001").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train-0001"), "error does not name the sample: {msg}");
    }

    #[test]
    fn missing_file_is_reported_with_path() {
        let (dir, ds) = tiny_dataset(5);
        std::fs::remove_file(dir.path().join("samples").join("test-0000.mask.fseg")).unwrap();
        let err = ds.load_sample("test-0000").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn batch_plan_keeps_partial_batches_and_is_seeded() {
        let plan = batch_plan(10, 4, None).unwrap();
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(plan[0], vec![0, 1, 2, 3]);

        let a = batch_plan(10, 4, Some(9)).unwrap();
        let b = batch_plan(10, 4, Some(9)).unwrap();
        assert_eq!(a, b);
        let c = batch_plan(10, 4, Some(10)).unwrap();
        assert_ne!(a, c);

        assert!(batch_plan(0, 4, None).is_err());
        assert!(batch_plan(4, 0, None).is_err());
    }

    #[test]
    fn stacked_batches_have_batch_major_layout() {
        let (_dir, ds) = tiny_dataset(6);
        let batches = split_iter(&ds, Split::Val, 2, None).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].pre.shape(), &[2, 4, 16, 16]);
        assert_eq!(batches[0].target.shape(), &[2, 1, 16, 16]);
        assert_eq!(batches[1].pre.shape(), &[1, 4, 16, 16]);
        // Sample 0 of the batch is exactly the first val sample.
        let s0 = ds.load_sample("val-0000").unwrap();
        assert_eq!(&batches[0].pre.data()[..s0.pre.numel()], s0.pre.data());
    }

    #[test]
    fn val_order_is_stable_without_seed() {
        let (_dir, ds) = tiny_dataset(7);
        let a = split_iter(&ds, Split::Val, 2, None).unwrap();
        let b = split_iter(&ds, Split::Val, 2, None).unwrap();
        assert_eq!(a[0].ids, b[0].ids);
    }
}
