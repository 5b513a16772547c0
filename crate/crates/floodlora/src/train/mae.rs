//! Masked-autoencoder pretraining for the encoder.
//!
//! A random patch subset (default 75%) is replaced at the embedding level
//! by a learned mask token (position encoding kept); a linear head then
//! reconstructs the pixel values of the masked patches and the MSE over
//! masked patches only is minimized. The head and mask token are training
//! scaffolding and are discarded afterwards — only encoder weights flow
//! back into the model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::autograd::Tape;
use crate::data::CHANNELS_PER_SNAPSHOT;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::rng::{stream, stream_rng, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeConfig {
    /// Fraction of patches to mask, strictly inside (0, 1).
    pub mask_ratio: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            mask_ratio: 0.75,
            epochs: 15,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must be strictly inside (0,1), got {}",
                self.mask_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MaeOutcome {
    /// Mean reconstruction loss per epoch, in order.
    pub epoch_losses: Vec<f64>,
}

/// Pretrain `model`'s encoder on single 4-channel snapshots. Deterministic
/// per seed. Returns the per-epoch reconstruction losses.
pub fn mae_pretrain(model: &mut SegModel, images: &[Tensor], cfg: &MaeConfig) -> Result<MaeOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Usage("mae_pretrain needs at least one image".into()));
    }
    let enc_cfg = model.encoder.cfg;
    let expect = [
        CHANNELS_PER_SNAPSHOT,
        enc_cfg.image_size,
        enc_cfg.image_size,
    ];
    for img in images {
        if img.shape() != expect {
            return Err(Error::Config(format!(
                "mae image shape {:?} does not match encoder config {:?}",
                img.shape(),
                expect
            )));
        }
    }

    // Work on a clone so the scaffolding parameters never leak into the
    // model; ParamIds in the layer structs stay valid for the clone.
    let mut work = model.clone();
    for id in work.params.ids().collect::<Vec<_>>() {
        let name = work.params.name(id).to_string();
        let trainable = name.starts_with("encoder.") && !name.contains(".lora_");
        work.params.set_requires_grad(id, trainable);
    }
    let d = enc_cfg.d_model;
    let mut init_rng = stream_rng(cfg.seed, stream::INIT);
    let mask_token = work.params.insert(
        "mae.mask_token",
        Tensor::rand_normal(vec![d], 0.0, 0.02, &mut init_rng).with_requires_grad(true),
    );
    let head_bound = 1.0 / (d as f64).sqrt();
    let head_w = work.params.insert(
        "mae.head.weight",
        Tensor::rand_uniform(vec![d, enc_cfg.patch_dim()], -head_bound, head_bound, &mut init_rng)
            .with_requires_grad(true),
    );
    let head_b = work.params.insert(
        "mae.head.bias",
        Tensor::zeros(vec![enc_cfg.patch_dim()]).with_requires_grad(true),
    );

    let train_cfg = TrainConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..TrainConfig::default()
    };
    let mut optimizer = Adam::new(&work.params, &train_cfg);
    let mut mask_rng = stream_rng(cfg.seed, stream::MAE_MASK);
    let n_patches = enc_cfg.seq_len();
    let n_masked = ((cfg.mask_ratio * n_patches as f64).round() as usize)
        .clamp(1, n_patches - 1);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle_rng = stream_rng(
            super::epoch_shuffle_seed(cfg.seed, epoch),
            stream::SHUFFLE,
        );
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let loss_val = mae_step(
                &mut work,
                &batch,
                mask_token,
                head_w,
                head_b,
                n_masked,
                &mut mask_rng,
                &mut optimizer,
            )?;
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: loss_val,
                    epoch,
                    batch: 0,
                    lr: optimizer.lr(),
                });
            }
            loss_sum += loss_val * batch.len() as f64;
        }
        epoch_losses.push(loss_sum / images.len() as f64);
    }

    // Only encoder weights flow back; mae.* names do not exist on the model.
    model.params.load_matching(&work.params)?;
    Ok(MaeOutcome { epoch_losses })
}

#[allow(clippy::too_many_arguments)]
fn mae_step(
    work: &mut SegModel,
    batch: &[&Tensor],
    mask_token: crate::params::ParamId,
    head_w: crate::params::ParamId,
    head_b: crate::params::ParamId,
    n_masked: usize,
    mask_rng: &mut Rng,
    optimizer: &mut Adam,
) -> Result<f64> {
    let enc_cfg = work.encoder.cfg;
    let b = batch.len();
    let n = enc_cfg.seq_len();
    let d = enc_cfg.d_model;
    let patch_dim = enc_cfg.patch_dim();

    // Stack the batch.
    let mut data = Vec::with_capacity(b * batch[0].numel());
    for img in batch {
        data.extend_from_slice(img.data());
    }
    let x = Tensor::new(
        vec![b, CHANNELS_PER_SNAPSHOT, enc_cfg.image_size, enc_cfg.image_size],
        data,
    )?;

    // Per-sample masked patch subset.
    let mut mask = vec![0.0f64; b * n];
    for s in 0..b {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(mask_rng);
        for &p in idx.iter().take(n_masked) {
            mask[s * n + p] = 1.0;
        }
    }
    let tile = |per_token: &[f64], width: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(per_token.len() * width);
        for &m in per_token {
            out.extend(std::iter::repeat_n(m, width));
        }
        out
    };

    let mut rng_unused = stream_rng(0, stream::DROPOUT);
    let mut tape = Tape::new();
    let x_id = tape.constant(x);
    let patches = tape.extract_patches(x_id, enc_cfg.patch_size)?;
    let patch_values = tape.value(patches).clone();
    let proj = work
        .encoder
        .patch_proj
        .forward(&mut tape, &work.params, patches, false, &mut rng_unused)?;

    let mask_d = tape.constant(Tensor::new(vec![b, n, d], tile(&mask, d))?);
    let keep_d = {
        let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        tape.constant(Tensor::new(vec![b, n, d], tile(&inv, d))?)
    };
    let zeros = tape.constant(Tensor::zeros(vec![b, n, d]));
    let token_param = tape.param(&work.params, mask_token);
    let token_tiled = tape.add_bias(zeros, token_param)?;

    let kept = tape.mul(proj, keep_d)?;
    let placed = tape.mul(token_tiled, mask_d)?;
    let mixed = tape.add(kept, placed)?;

    let mut pos = Vec::with_capacity(b * n * d);
    for _ in 0..b {
        pos.extend_from_slice(work.encoder.pos_encoding.data());
    }
    let pos = tape.constant(Tensor::new(vec![b, n, d], pos)?);
    let mut tokens = tape.add(mixed, pos)?;

    for block in &work.encoder.blocks {
        tokens = block.forward(&mut tape, &work.params, tokens, false, &mut rng_unused)?;
    }
    let tokens = work.encoder.final_norm.forward(&mut tape, &work.params, tokens)?;

    let w = tape.param(&work.params, head_w);
    let bias = tape.param(&work.params, head_b);
    let pred = tape.linear(tokens, w, Some(bias))?;

    let target = tape.constant(patch_values);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let mask_wide = tape.constant(Tensor::new(vec![b, n, patch_dim], tile(&mask, patch_dim))?);
    let masked = tape.mul(sq, mask_wide)?;
    let total = tape.sum(masked);
    let loss = tape.scale(total, 1.0 / (b * n_masked * patch_dim) as f64);

    let loss_val = tape.value(loss).item();
    tape.backward(loss)?;
    tape.write_param_grads(&mut work.params);
    drop(tape);
    optimizer.step(&mut work.params)?;
    Ok(loss_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::InitMode;
    use crate::model::{EncoderConfig, Strategy};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            patch_size: 8,
            in_channels: 4,
            image_size: 16,
            mlp_ratio: 2,
        }
    }

    fn images(cfg: &EncoderConfig, count: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = stream_rng(seed, stream::SYNTH);
        (0..count)
            .map(|_| {
                Tensor::rand_uniform(
                    vec![4, cfg.image_size, cfg.image_size],
                    -1.0,
                    1.0,
                    &mut rng,
                )
            })
            .collect()
    }

    #[test]
    fn mask_ratio_bounds_are_enforced() {
        let bad = MaeConfig {
            mask_ratio: 0.0,
            ..MaeConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MaeConfig {
            mask_ratio: 1.0,
            ..MaeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scaffolding_never_leaks_into_the_model() {
        let cfg = tiny_cfg();
        let mut model = SegModel::new(cfg, Strategy::Full, InitMode::ZeroB, 1).unwrap();
        let n_before = model.params.len();
        let mae = MaeConfig {
            epochs: 1,
            batch_size: 4,
            ..MaeConfig::default()
        };
        mae_pretrain(&mut model, &images(&cfg, 4, 2), &mae).unwrap();
        assert_eq!(model.params.len(), n_before);
        assert!(model.params.by_name("mae.mask_token").is_none());
    }

    #[test]
    fn pretraining_changes_encoder_but_not_decoder() {
        let cfg = tiny_cfg();
        let mut model = SegModel::new(cfg, Strategy::Full, InitMode::ZeroB, 3).unwrap();
        let enc_before = model.params.get(model.encoder.patch_proj.weight).clone();
        let dec_before = model.params.get(model.decoder.conv1.kernel).clone();
        let mae = MaeConfig {
            epochs: 2,
            batch_size: 4,
            ..MaeConfig::default()
        };
        mae_pretrain(&mut model, &images(&cfg, 6, 4), &mae).unwrap();
        assert_ne!(
            model.params.get(model.encoder.patch_proj.weight).data(),
            enc_before.data()
        );
        assert_eq!(
            model.params.get(model.decoder.conv1.kernel).data(),
            dec_before.data()
        );
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = tiny_cfg();
        let run = || {
            let mut model = SegModel::new(cfg, Strategy::Full, InitMode::ZeroB, 5).unwrap();
            let mae = MaeConfig {
                epochs: 2,
                batch_size: 4,
                seed: 9,
                ..MaeConfig::default()
            };
            mae_pretrain(&mut model, &images(&cfg, 6, 6), &mae).unwrap().epoch_losses
        };
        assert_eq!(run(), run());
    }
}
