//! Synthetic pre/post flood-scene generator.
//!
//! Scenes derive from a smoothed random elevation field: pre-event water
//! fills the lowest `water_fraction` of the terrain, post-event water rises
//! by a random flood growth. Water pixels get low mean backscatter, land
//! higher; VH channels are a scaled copy of VV; ascending/descending orbit
//! channels share the scene means but draw independent multiplicative
//! speckle. The OOD split draws from a disjoint RNG stream with shifted
//! means, heavier speckle and a shifted water-fraction regime.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::fseg;
use super::{ChannelStats, DatasetManifest, SampleRecord, Split, CHANNELS_PER_SNAPSHOT};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng, Rng};

/// Generator knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_ood: usize,
    /// Pre-event water fraction range, each sample draws uniformly.
    pub water_fraction: (f64, f64),
    /// Additional terrain fraction flooded post-event.
    pub flood_growth: (f64, f64),
    /// Multiplicative speckle strength in [0, 1).
    pub speckle: f64,
    pub seed: u64,
    /// `false` (default): mask = all post-event water.
    /// `true`: mask = post-event water minus pre-event water.
    pub flood_only_labels: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_train: 64,
            n_val: 16,
            n_test: 16,
            n_ood: 16,
            water_fraction: (0.15, 0.35),
            flood_growth: (0.10, 0.25),
            speckle: 0.35,
            seed: 0,
            flood_only_labels: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi < 1.0 && lo <= hi;
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !frac_ok(self.water_fraction) || !frac_ok(self.flood_growth) {
            return Err(Error::Config(format!(
                "fractions must lie in (0,1): water {:?}, growth {:?}",
                self.water_fraction, self.flood_growth
            )));
        }
        if self.water_fraction.1 + self.flood_growth.1 > 0.9 {
            return Err(Error::Config(
                "water_fraction + flood_growth may not exceed 0.9".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.speckle) {
            return Err(Error::Config(format!(
                "speckle must be in [0,1), got {}",
                self.speckle
            )));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 || self.n_ood == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        Ok(())
    }
}

/// Backscatter regime for one split family.
#[derive(Debug, Clone, Copy)]
pub struct Regime {
    pub water_mean_vv: f64,
    pub land_mean_vv: f64,
    pub vh_factor: f64,
    pub speckle_mult: f64,
    /// Added to the sampled water fraction (clamped inside (0, 0.6]).
    pub water_shift: f64,
}

impl Regime {
    pub fn in_distribution() -> Self {
        Regime {
            water_mean_vv: 0.06,
            land_mean_vv: 0.30,
            vh_factor: 0.40,
            speckle_mult: 1.0,
            water_shift: 0.0,
        }
    }

    /// Shifted means, heavier speckle, larger water bodies.
    pub fn out_of_distribution() -> Self {
        Regime {
            water_mean_vv: 0.10,
            land_mean_vv: 0.46,
            vh_factor: 0.52,
            speckle_mult: 1.6,
            water_shift: 0.10,
        }
    }
}

/// Separable box blur, `passes` iterations.
fn box_blur(data: &mut Vec<f64>, h: usize, w: usize, radius: usize, passes: usize) {
    let mut tmp = vec![0.0; h * w];
    for _ in 0..passes {
        // Horizontal.
        for y in 0..h {
            let row = &data[y * w..(y + 1) * w];
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius + 1).min(w);
                tmp[y * w + x] = row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        // Vertical.
        for x in 0..w {
            for y in 0..h {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius + 1).min(h);
                let mut s = 0.0;
                for yy in lo..hi {
                    s += tmp[yy * w + x];
                }
                data[y * w + x] = s / (hi - lo) as f64;
            }
        }
    }
}

/// Smoothed random terrain normalized to [0, 1].
fn terrain(size: usize, rng: &mut Rng) -> Vec<f64> {
    let mut field: Vec<f64> = (0..size * size)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            // Symmetrize the exponential for a smooth zero-mean field.
            if rng.random_range(0.0..1.0) < 0.5 {
                e
            } else {
                -e
            }
        })
        .collect();
    box_blur(&mut field, size, size, (size / 16).max(2), 3);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &field {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    for v in &mut field {
        *v = (*v - lo) / span;
    }
    field
}

/// Elevation threshold putting `frac` of pixels under water.
fn quantile_threshold(elevation: &[f64], frac: f64) -> f64 {
    let mut sorted = elevation.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("terrain is finite"));
    let idx = ((frac * sorted.len() as f64) as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// One 4-channel snapshot: [vv_asc, vh_asc, vv_desc, vh_desc],
/// channel-major f32.
fn render_snapshot(
    water: &[bool],
    regime: &Regime,
    speckle: f64,
    rng: &mut Rng,
) -> Vec<f32> {
    let n = water.len();
    let s = (speckle * regime.speckle_mult).min(0.95);
    let mut out = Vec::with_capacity(4 * n);
    for _orbit in 0..2 {
        for pol in 0..2 {
            let factor = if pol == 0 { 1.0 } else { regime.vh_factor };
            for &is_water in water {
                let mean = if is_water {
                    regime.water_mean_vv
                } else {
                    regime.land_mean_vv
                } * factor;
                let e: f64 = Exp1.sample(rng);
                let draw = (1.0 - s) + s * e;
                out.push((mean * draw) as f32);
            }
        }
    }
    out
}

pub(super) struct GeneratedSample {
    pub id: String,
    pub split: Split,
    pub pre: Vec<f32>,
    pub post: Vec<f32>,
    pub mask: Vec<u8>,
}

fn generate_sample(
    cfg: &SynthConfig,
    split: Split,
    index: usize,
    regime: &Regime,
    rng: &mut Rng,
) -> GeneratedSample {
    let size = cfg.image_size;
    let elevation = terrain(size, rng);
    let water_frac = (rng.random_range(cfg.water_fraction.0..=cfg.water_fraction.1)
        + regime.water_shift)
        .clamp(0.01, 0.6);
    let growth = rng.random_range(cfg.flood_growth.0..=cfg.flood_growth.1);

    let pre_thresh = quantile_threshold(&elevation, water_frac);
    let post_thresh = quantile_threshold(&elevation, (water_frac + growth).min(0.9));
    let pre_water: Vec<bool> = elevation.iter().map(|&e| e < pre_thresh).collect();
    let post_water: Vec<bool> = elevation.iter().map(|&e| e < post_thresh).collect();

    let pre = render_snapshot(&pre_water, regime, cfg.speckle, rng);
    let post = render_snapshot(&post_water, regime, cfg.speckle, rng);
    let mask: Vec<u8> = pre_water
        .iter()
        .zip(&post_water)
        .map(|(&p, &q)| {
            let flooded = if cfg.flood_only_labels { q && !p } else { q };
            u8::from(flooded)
        })
        .collect();
    GeneratedSample {
        id: format!("{}-{index:04}", split.as_str()),
        split,
        pre,
        post,
        mask,
    }
}

pub(super) fn generate_all(cfg: &SynthConfig) -> Result<Vec<GeneratedSample>> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let plan = [
        (Split::Train, cfg.n_train, 0u64, Regime::in_distribution()),
        (Split::Val, cfg.n_val, 1, Regime::in_distribution()),
        (Split::Test, cfg.n_test, 2, Regime::in_distribution()),
        (Split::Ood, cfg.n_ood, 3, Regime::out_of_distribution()),
    ];
    for (split, count, stream_offset, regime) in plan {
        let mut rng = stream_rng(cfg.seed, stream::SYNTH + stream_offset);
        for i in 0..count {
            samples.push(generate_sample(cfg, split, i, &regime, &mut rng));
        }
    }
    Ok(samples)
}

/// Generate the dataset under `root`: `manifest.json` plus
/// `samples/<id>.{pre,post,mask}.fseg`. Deterministic per seed.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    let samples = generate_all(cfg)?;
    let sample_dir = root.join("samples");
    std::fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;

    // Train-split normalization stats, one per channel (pre 4 + post 4).
    let mut sums = [0.0f64; 2 * CHANNELS_PER_SNAPSHOT];
    let mut sqs = [0.0f64; 2 * CHANNELS_PER_SNAPSHOT];
    let mut n_train_px = 0usize;
    let size = cfg.image_size;
    let plane = size * size;

    for s in &samples {
        fseg::write_raster(
            &sample_dir.join(format!("{}.pre.fseg", s.id)),
            CHANNELS_PER_SNAPSHOT,
            size,
            size,
            &s.pre,
        )?;
        fseg::write_raster(
            &sample_dir.join(format!("{}.post.fseg", s.id)),
            CHANNELS_PER_SNAPSHOT,
            size,
            size,
            &s.post,
        )?;
        fseg::write_mask(&sample_dir.join(format!("{}.mask.fseg", s.id)), size, size, &s.mask)?;
        if s.split == Split::Train {
            n_train_px += plane;
            for c in 0..CHANNELS_PER_SNAPSHOT {
                for v in &s.pre[c * plane..(c + 1) * plane] {
                    sums[c] += f64::from(*v);
                    sqs[c] += f64::from(*v) * f64::from(*v);
                }
                for v in &s.post[c * plane..(c + 1) * plane] {
                    sums[CHANNELS_PER_SNAPSHOT + c] += f64::from(*v);
                    sqs[CHANNELS_PER_SNAPSHOT + c] += f64::from(*v) * f64::from(*v);
                }
            }
        }
    }

    let stats: Vec<ChannelStats> = (0..2 * CHANNELS_PER_SNAPSHOT)
        .map(|c| {
            let mean = sums[c] / n_train_px as f64;
            let var = (sqs[c] / n_train_px as f64 - mean * mean).max(1e-12);
            ChannelStats {
                mean,
                std: var.sqrt(),
            }
        })
        .collect();

    let manifest = DatasetManifest {
        version: 1,
        image_size: size,
        channel_names: DatasetManifest::default_channel_names(),
        samples: samples
            .iter()
            .map(|s| SampleRecord {
                id: s.id.clone(),
                split: s.split,
            })
            .collect(),
        stats,
    };
    manifest.save(root)?;
    Ok(manifest)
}
