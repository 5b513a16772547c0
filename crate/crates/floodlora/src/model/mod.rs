//! The segmentation model: ViT encoder + deconvolution decoder, with three
//! adaptation strategies (full fine-tuning, frozen encoder, LoRA).

mod checkpoint;
mod decoder;
mod encoder;

pub use checkpoint::{load_encoder_weights, load_model, save_encoder, save_model};
pub use decoder::{ConvLayer, DeconvLayer, SegDecoder};
pub use encoder::{position_encoding_2d, AttentionBlock, Encoder, EncoderConfig, LayerNorm};

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::lora::{self, init_adapter, InitMode, ParamCountReport};
use crate::params::ParamStore;
use crate::rng::{stream, stream_rng, Rng};
use crate::tensor::Tensor;

/// Which parameters train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Everything trains.
    Full,
    /// Encoder frozen; only the decoder trains.
    Frozen,
    /// Encoder frozen; LoRA adapters on `to_qkv`/`to_out` plus the decoder
    /// train.
    Lora { rank: usize, alpha: f64, dropout: f64 },
}

impl Strategy {
    /// LoRA with the recipe defaults `α = 2r`, dropout 0.1.
    pub fn lora_with_defaults(rank: usize) -> Self {
        Strategy::Lora {
            rank,
            alpha: 2.0 * rank as f64,
            dropout: 0.1,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Strategy::Full => "full".into(),
            Strategy::Frozen => "frozen".into(),
            Strategy::Lora { rank, .. } => format!("lora-r{rank}"),
        }
    }
}

/// Encoder, decoder and their shared parameter store.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: SegDecoder,
    pub strategy: Strategy,
    pub init_mode: InitMode,
    pub seed: u64,
}

impl SegModel {
    /// Build a model with freshly initialized weights.
    pub fn new(
        cfg: EncoderConfig,
        strategy: Strategy,
        init_mode: InitMode,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream_rng(seed, stream::INIT);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, cfg, &mut rng)?;
        let decoder = SegDecoder::new(&mut params, cfg.d_model, &mut rng)?;
        let mut model = SegModel {
            params,
            encoder,
            decoder,
            strategy,
            init_mode,
            seed,
        };
        model.apply_strategy(&mut rng)?;
        Ok(model)
    }

    fn apply_strategy(&mut self, rng: &mut Rng) -> Result<()> {
        match self.strategy {
            Strategy::Full => {}
            Strategy::Frozen => self.freeze_encoder_base(),
            Strategy::Lora { rank, alpha, dropout } => {
                let d = self.encoder.cfg.d_model;
                if rank > d {
                    return Err(Error::Config(format!(
                        "lora rank {rank} exceeds the smallest adapted extent {d}"
                    )));
                }
                for layer in self.encoder.adapted_layers_mut() {
                    let adapter = init_adapter(
                        layer.d_in,
                        layer.d_out,
                        rank,
                        alpha,
                        dropout,
                        self.init_mode,
                        rng,
                    )?;
                    layer.attach_adapter(&mut self.params, adapter)?;
                }
                self.freeze_encoder_base();
            }
        }
        Ok(())
    }

    /// Freeze every encoder parameter except adapter factors.
    fn freeze_encoder_base(&mut self) {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if name.starts_with("encoder.") && !name.contains(".lora_") {
                self.params.set_requires_grad(id, false);
            }
        }
    }

    /// New model under a different strategy carrying over this model's base
    /// weights (adapters, if any, start fresh at their init).
    pub fn with_strategy(&self, strategy: Strategy) -> Result<SegModel> {
        let mut next = SegModel::new(self.encoder.cfg, strategy, self.init_mode, self.seed)?;
        next.params.load_matching(&self.params)?;
        Ok(next)
    }

    /// `[b, C, H, W]` per snapshot → logits `[b, 1, H, W]`. Sigmoid is
    /// applied inside the losses and metrics, never here.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pre: NodeId,
        post: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let z_pre = self.encoder.forward(tape, &self.params, pre, training, rng)?;
        let z_post = self.encoder.forward(tape, &self.params, post, training, rng)?;
        self.decoder
            .decode_and_fuse(tape, &self.params, z_pre, z_post, self.encoder.cfg.grid())
    }

    /// Convenience eval-mode forward on plain tensors.
    pub fn infer(&self, pre: &Tensor, post: &Tensor) -> Result<Tensor> {
        let mut rng = stream_rng(0, stream::DROPOUT);
        let mut tape = Tape::new();
        let pre = tape.constant(pre.clone());
        let post = tape.constant(post.clone());
        let logits = self.forward(&mut tape, pre, post, false, &mut rng)?;
        Ok(tape.value(logits).clone())
    }

    /// Fold every adapter into its base weight and return a plain frozen
    /// model with no adapter parameters.
    pub fn merged_copy(&self) -> Result<SegModel> {
        if !matches!(self.strategy, Strategy::Lora { .. }) {
            return Err(Error::Usage(format!(
                "merge requires a lora-strategy model, got {}",
                self.strategy.label()
            )));
        }
        let mut fused = self.clone();
        for layer in fused.encoder.adapted_layers_mut() {
            layer.merge(&mut fused.params)?;
        }
        let mut plain = SegModel::new(self.encoder.cfg, Strategy::Frozen, self.init_mode, self.seed)?;
        plain.params.load_matching(&fused.params)?;
        Ok(plain)
    }

    /// Itemized parameter counts under the active strategy.
    pub fn param_report(&self) -> ParamCountReport {
        lora::count_trainable(&self.params, &self.strategy.label())
    }

    pub fn trainable_params(&self) -> usize {
        self.params.trainable_numel()
    }
}

// ── closed-form parameter accounting ─────────────────────────────────

/// One architectural component and its parameter count.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentCount {
    pub name: String,
    pub count: usize,
}

/// Per-component counts implied by the architecture, without building it.
pub fn analytic_param_counts(cfg: &EncoderConfig) -> Vec<ComponentCount> {
    let d = cfg.d_model;
    let mut out = vec![ComponentCount {
        name: "encoder.patch_embed".into(),
        count: cfg.patch_dim() * d + d,
    }];
    let per_layer = [
        ("norm1", 2 * d),
        ("to_qkv", d * 3 * d + 3 * d),
        ("to_out", d * d + d),
        ("norm2", 2 * d),
        ("mlp_in", d * cfg.mlp_ratio * d + cfg.mlp_ratio * d),
        ("mlp_out", cfg.mlp_ratio * d * d + d),
    ];
    for i in 0..cfg.n_layers {
        for (part, count) in per_layer {
            out.push(ComponentCount {
                name: format!("encoder.layer{i}.{part}"),
                count,
            });
        }
    }
    out.push(ComponentCount {
        name: "encoder.final_norm".into(),
        count: 2 * d,
    });
    let conv = |oc: usize, ic: usize, k: usize| oc * ic * k * k + oc;
    out.push(ComponentCount { name: "decoder.conv1".into(), count: conv(d / 2, d, 3) });
    out.push(ComponentCount { name: "decoder.conv2".into(), count: conv(d / 4, d / 2, 3) });
    out.push(ComponentCount { name: "decoder.deconv1".into(), count: conv(d / 8, d / 4, 2) });
    out.push(ComponentCount { name: "decoder.deconv2".into(), count: conv(d / 16, d / 8, 2) });
    out.push(ComponentCount { name: "decoder.deconv3".into(), count: conv(d / 32, d / 16, 2) });
    out.push(ComponentCount { name: "decoder.fusion".into(), count: conv(1, 2 * (d / 32), 3) });
    out
}

pub fn analytic_encoder_params(cfg: &EncoderConfig) -> usize {
    analytic_param_counts(cfg)
        .iter()
        .filter(|c| c.name.starts_with("encoder."))
        .map(|c| c.count)
        .sum()
}

pub fn analytic_decoder_params(cfg: &EncoderConfig) -> usize {
    analytic_param_counts(cfg)
        .iter()
        .filter(|c| c.name.starts_with("decoder."))
        .map(|c| c.count)
        .sum()
}

/// Adapter parameters for rank `r` over all layers:
/// `n_layers · (r·(d + 3d) + r·(d + d))`.
pub fn analytic_adapter_params(cfg: &EncoderConfig, rank: usize) -> usize {
    let d = cfg.d_model;
    cfg.n_layers
        * (lora::adapter_param_count(d, 3 * d, rank) + lora::adapter_param_count(d, d, rank))
}

/// Trainable count implied by a strategy.
pub fn analytic_trainable_params(cfg: &EncoderConfig, strategy: &Strategy) -> usize {
    match strategy {
        Strategy::Full => analytic_encoder_params(cfg) + analytic_decoder_params(cfg),
        Strategy::Frozen => analytic_decoder_params(cfg),
        Strategy::Lora { rank, .. } => {
            analytic_decoder_params(cfg) + analytic_adapter_params(cfg, *rank)
        }
    }
}

// ── memory accounting ────────────────────────────────────────────────

/// Rough per-run memory footprint (64-bit words as stored here).
#[derive(Debug, Clone, Serialize)]
pub struct MemoryEstimate {
    /// Forward activations retained for backward, per sample (both
    /// snapshots), in elements.
    pub activation_elems_per_sample: usize,
    pub activation_bytes_per_sample: usize,
    pub param_count: usize,
    pub param_bytes: usize,
    pub trainable_count: usize,
    /// Gradient + two Adam moment buffers per trainable parameter.
    pub optimizer_bytes: usize,
    pub total_bytes_batch1: usize,
}

/// Estimate training memory for a config and strategy. The attention score
/// tensors dominate at large grids: 3 retained `[h, n, n]` buffers per
/// layer per snapshot.
pub fn estimate_memory(cfg: &EncoderConfig, strategy: &Strategy) -> MemoryEstimate {
    let d = cfg.d_model;
    let n = cfg.seq_len();
    let g = cfg.grid();
    let h = cfg.n_heads;

    // Per snapshot: embedding stage.
    let mut elems = cfg.patch_dim() * n + 2 * n * d;
    // Per layer: norms, qkv + chunks + head splits, scores/probs/scaled,
    // context + merge, residuals, mlp.
    let per_layer = 2 * n * d                  // norms
        + n * 3 * d + 3 * n * d + 3 * n * d    // qkv, chunks, head splits
        + 3 * h * n * n                        // scores, scaled, probs
        + 3 * n * d                            // ctx, merged, to_out
        + 2 * n * d                            // residual adds
        + 2 * n * cfg.mlp_ratio * d + n * d; // mlp hidden, relu, out
    elems += cfg.n_layers * per_layer;
    elems += n * d; // final norm
    // Decoder per snapshot.
    elems += 2 * (d / 2) * g * g
        + 2 * (d / 4) * g * g
        + 2 * (d / 8) * (2 * g) * (2 * g)
        + 2 * (d / 16) * (4 * g) * (4 * g)
        + 2 * (d / 32) * (8 * g) * (8 * g);
    let mut total = 2 * elems; // two snapshots
    // Fusion input and logits.
    total += 2 * (d / 32) * (8 * g) * (8 * g) + (8 * g) * (8 * g);

    let params = analytic_encoder_params(cfg) + analytic_decoder_params(cfg);
    let trainable = analytic_trainable_params(cfg, strategy);
    MemoryEstimate {
        activation_elems_per_sample: total,
        activation_bytes_per_sample: total * 8,
        param_count: params,
        param_bytes: params * 8,
        trainable_count: trainable,
        optimizer_bytes: trainable * 8 * 3,
        total_bytes_batch1: total * 8 + params * 8 + trainable * 8 * 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn rand_pair(cfg: &EncoderConfig, b: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = stream_rng(seed, stream::SYNTH);
        let shape = vec![b, cfg.in_channels, cfg.image_size, cfg.image_size];
        (
            Tensor::rand_uniform(shape.clone(), -1.0, 1.0, &mut rng),
            Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng),
        )
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = tiny_cfg();
        let model = SegModel::new(cfg, Strategy::Full, InitMode::ZeroB, 1).unwrap();
        let (pre, post) = rand_pair(&cfg, 2, 2);
        let logits = model.infer(&pre, &post).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 16, 16]);
    }

    #[test]
    fn batch_of_two_equals_two_batches_of_one() {
        let cfg = tiny_cfg();
        let model = SegModel::new(cfg, Strategy::Full, InitMode::ZeroB, 3).unwrap();
        let (pre, post) = rand_pair(&cfg, 2, 4);
        let both = model.infer(&pre, &post).unwrap();

        let slice = |t: &Tensor, i: usize| {
            let per = t.numel() / 2;
            Tensor::new(
                vec![1, cfg.in_channels, cfg.image_size, cfg.image_size],
                t.data()[i * per..(i + 1) * per].to_vec(),
            )
            .unwrap()
        };
        let first = model.infer(&slice(&pre, 0), &slice(&post, 0)).unwrap();
        let second = model.infer(&slice(&pre, 1), &slice(&post, 1)).unwrap();
        let per = both.numel() / 2;
        for (a, b) in both.data()[..per].iter().zip(first.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in both.data()[per..].iter().zip(second.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strategy_gradient_masks() {
        let cfg = tiny_cfg();
        for strategy in [
            Strategy::Full,
            Strategy::Frozen,
            Strategy::lora_with_defaults(2),
        ] {
            let mut model = SegModel::new(cfg, strategy, InitMode::ZeroB, 5).unwrap();
            let (pre, post) = rand_pair(&cfg, 1, 6);
            let mut rng = stream_rng(7, stream::DROPOUT);
            let mut tape = Tape::new();
            let pre = tape.constant(pre);
            let post = tape.constant(post);
            let logits = model.forward(&mut tape, pre, post, false, &mut rng).unwrap();
            let loss = tape.mean(logits);
            tape.backward(loss).unwrap();
            tape.write_param_grads(&mut model.params);

            for id in model.params.ids() {
                let name = model.params.name(id);
                let t = model.params.get(id);
                let has_grad = t.grad.is_some();
                let expect = match strategy {
                    Strategy::Full => true,
                    Strategy::Frozen => name.starts_with("decoder."),
                    Strategy::Lora { .. } => {
                        name.starts_with("decoder.") || name.contains(".lora_")
                    }
                };
                assert_eq!(
                    has_grad, expect,
                    "{}: grad presence {has_grad} unexpected under {}",
                    name,
                    strategy.label()
                );
                if has_grad {
                    assert_eq!(t.grad.as_ref().unwrap().len(), t.numel());
                }
            }
        }
    }

    #[test]
    fn zero_b_lora_logits_match_frozen_exactly() {
        let cfg = tiny_cfg();
        let frozen = SegModel::new(cfg, Strategy::Frozen, InitMode::ZeroB, 8).unwrap();
        let lora = frozen.with_strategy(Strategy::lora_with_defaults(4)).unwrap();
        let (pre, post) = rand_pair(&cfg, 2, 9);
        let a = frozen.infer(&pre, &post).unwrap();
        let b = lora.infer(&pre, &post).unwrap();
        assert_eq!(a.data(), b.data(), "zero_B lora must equal frozen bitwise");
    }

    #[test]
    fn merged_copy_agrees_and_drops_adapters() {
        let cfg = tiny_cfg();
        let mut lora = SegModel::new(
            cfg,
            Strategy::Lora { rank: 3, alpha: 6.0, dropout: 0.1 },
            InitMode::BothRandom,
            10,
        )
        .unwrap();
        // Perturb adapters so the merge is non-trivial.
        let ids: Vec<_> = lora.params.ids().collect();
        for id in ids {
            if lora.params.name(id).contains(".lora_") {
                for v in lora.params.get_mut(id).data_mut() {
                    *v += 0.01;
                }
            }
        }
        let merged = lora.merged_copy().unwrap();
        assert!(merged
            .params
            .ids()
            .all(|id| !merged.params.name(id).contains(".lora_")));
        let (pre, post) = rand_pair(&cfg, 1, 11);
        let a = lora.infer(&pre, &post).unwrap();
        let b = merged.infer(&pre, &post).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
        // Merging a non-lora model is a usage error.
        assert!(matches!(merged.merged_copy(), Err(Error::Usage(_))));
    }

    #[test]
    fn analytic_counts_match_live_store() {
        let cfg = tiny_cfg();
        let model = SegModel::new(cfg, Strategy::Full, InitMode::ZeroB, 12).unwrap();
        let analytic: usize = analytic_param_counts(&cfg).iter().map(|c| c.count).sum();
        assert_eq!(analytic, model.params.total_numel());

        for strategy in [Strategy::Frozen, Strategy::lora_with_defaults(4)] {
            let m = SegModel::new(cfg, strategy, InitMode::ZeroB, 13).unwrap();
            assert_eq!(
                analytic_trainable_params(&cfg, &strategy),
                m.trainable_params(),
                "strategy {}",
                strategy.label()
            );
        }
    }

    #[test]
    fn desk_adapter_counts_match_hand_arithmetic() {
        let desk = EncoderConfig::desk();
        // Per layer: to_qkv 4·(64+192)… r=4: 4·256 = 1024; to_out 4·128 = 512.
        assert_eq!(analytic_adapter_params(&desk, 4), 4 * (1024 + 512));
    }

    #[test]
    fn paper_adapter_count_is_442368_at_rank_8() {
        let paper = EncoderConfig::paper();
        assert_eq!(analytic_adapter_params(&paper, 8), 442_368);
        assert_eq!(analytic_adapter_params(&paper, 8), 12 * 8 * 4608);
    }

    #[test]
    fn trainable_ordering_full_gt_lora_gt_frozen() {
        let cfg = EncoderConfig::desk();
        for r in [1, 4, 16, 64] {
            let full = analytic_trainable_params(&cfg, &Strategy::Full);
            let lora = analytic_trainable_params(&cfg, &Strategy::lora_with_defaults(r));
            let frozen = analytic_trainable_params(&cfg, &Strategy::Frozen);
            assert!(full > lora && lora > frozen, "r={r}");
        }
    }

    #[test]
    fn lora_trainable_is_strictly_monotone_in_rank() {
        let cfg = EncoderConfig::desk();
        let mut last = 0;
        for r in 1..=16 {
            let n = analytic_trainable_params(&cfg, &Strategy::lora_with_defaults(r));
            assert!(n > last);
            last = n;
        }
    }

    #[test]
    fn paper_scale_attention_buffers_explain_oom() {
        let est = estimate_memory(&EncoderConfig::paper(), &Strategy::Full);
        // Retained activations alone exceed a 40 GB device at batch 1.
        assert!(est.activation_bytes_per_sample > 40_000_000_000_usize);
        let desk = estimate_memory(&EncoderConfig::desk(), &Strategy::Full);
        assert!(desk.total_bytes_batch1 < 200_000_000);
    }
}
