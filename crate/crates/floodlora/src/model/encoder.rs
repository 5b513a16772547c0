//! ViT-style encoder: patch embedding, pre-norm attention blocks, final norm.

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::lora::AdaptedLinear;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Laptop-scale preset: 64×64 scenes, 4 layers of width 64.
    pub fn desk() -> Self {
        EncoderConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            patch_size: 8,
            in_channels: 4,
            image_size: 64,
            mlp_ratio: 4,
        }
    }

    /// Publication-scale preset: 512×512 scenes, 12 layers of width 768.
    pub fn paper() -> Self {
        EncoderConfig {
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            patch_size: 8,
            in_channels: 4,
            image_size: 512,
            mlp_ratio: 4,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Patch-grid extent per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `(image_size / patch_size)²`.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by 4 for 2-d sinusoidal position encoding",
                self.d_model
            )));
        }
        Ok(())
    }
}

/// Fixed 2-d sinusoidal position table, `[grid², d_model]`. Half the
/// channels encode the row coordinate, half the column, each as the usual
/// sin/cos ladder with base 10⁴.
pub fn position_encoding_2d(grid_h: usize, grid_w: usize, d_model: usize) -> Tensor {
    assert_eq!(d_model % 4, 0, "d_model must be divisible by 4");
    let quarter = d_model / 4;
    let mut data = vec![0.0; grid_h * grid_w * d_model];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let row = &mut data[(gy * grid_w + gx) * d_model..(gy * grid_w + gx + 1) * d_model];
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                row[i] = (gy as f64 * freq).sin();
                row[quarter + i] = (gy as f64 * freq).cos();
                row[2 * quarter + i] = (gx as f64 * freq).sin();
                row[3 * quarter + i] = (gx as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![grid_h * grid_w, d_model], data).expect("consistent by construction")
}

/// Affine layer norm over the last extent.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.insert(
            format!("{name}.gamma"),
            Tensor::full(vec![dim], 1.0).with_requires_grad(true),
        );
        let beta = store.insert(
            format!("{name}.beta"),
            Tensor::zeros(vec![dim]).with_requires_grad(true),
        );
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Pre-norm transformer block; LoRA attaches to `to_qkv` and `to_out` only.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub to_qkv: AdaptedLinear,
    pub to_out: AdaptedLinear,
    pub norm2: LayerNorm,
    pub mlp_in: AdaptedLinear,
    pub mlp_out: AdaptedLinear,
    pub n_heads: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        AttentionBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            to_qkv: AdaptedLinear::new(store, &format!("{name}.to_qkv"), d, 3 * d, true, rng),
            to_out: AdaptedLinear::new(store, &format!("{name}.to_out"), d, d, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp_in: AdaptedLinear::new(store, &format!("{name}.mlp_in"), d, cfg.mlp_ratio * d, true, rng),
            mlp_out: AdaptedLinear::new(store, &format!("{name}.mlp_out"), cfg.mlp_ratio * d, d, true, rng),
            n_heads: cfg.n_heads,
        }
    }

    /// Multi-head scaled dot-product attention on pre-normed input.
    /// Returns `(output, attention_probs)`; probs are `[b, h, n, n]`.
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(NodeId, NodeId)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Config(format!(
                "attention expects [b, n, d_model], got {shape:?}"
            )));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if d != self.to_qkv.d_in {
            return Err(Error::ShapeMismatch {
                op: "attention_forward",
                lhs: shape,
                rhs: vec![self.to_qkv.d_in],
            });
        }
        let heads = self.n_heads;
        let d_head = d / heads;

        let qkv = self.to_qkv.forward(tape, store, x, training, rng)?;
        let [q, k, v] = tape.chunk3(qkv)?;
        let split = |tape: &mut Tape, t: NodeId| -> Result<NodeId> {
            let r = tape.reshape(t, vec![b, n, heads, d_head])?;
            tape.permute(r, &[0, 2, 1, 3]) // [b, h, n, d_head]
        };
        let q = split(tape, q)?;
        let k = split(tape, k)?;
        let v = split(tape, v)?;

        let k_t = tape.permute(k, &[0, 1, 3, 2])?; // [b, h, d_head, n]
        let scores = tape.bmm(q, k_t)?;
        let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
        let probs = tape.softmax_lastdim(scaled);
        let ctx = tape.bmm(probs, v)?; // [b, h, n, d_head]

        let merged = tape.permute(ctx, &[0, 2, 1, 3])?; // [b, n, h, d_head]
        let merged = tape.reshape(merged, vec![b, n, d])?;
        let out = self.to_out.forward(tape, store, merged, training, rng)?;
        Ok((out, probs))
    }

    /// Full pre-norm block: `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let normed = self.norm1.forward(tape, store, x)?;
        let (attn, _) = self.attention(tape, store, normed, training, rng)?;
        let x = tape.add(x, attn)?;

        let normed = self.norm2.forward(tape, store, x)?;
        let hidden = self.mlp_in.forward(tape, store, normed, training, rng)?;
        let hidden = tape.relu(hidden);
        let mlp = self.mlp_out.forward(tape, store, hidden, training, rng)?;
        tape.add(x, mlp)
    }
}

/// Patch embedding + `n_layers` attention blocks + final norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_proj: AdaptedLinear,
    pub pos_encoding: Tensor,
    pub blocks: Vec<AttentionBlock>,
    pub final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_proj = AdaptedLinear::new(
            store,
            "encoder.patch_embed",
            cfg.patch_dim(),
            cfg.d_model,
            true,
            rng,
        );
        let blocks = (0..cfg.n_layers)
            .map(|i| AttentionBlock::new(store, &format!("encoder.layer{i}"), &cfg, rng))
            .collect();
        let final_norm = LayerNorm::new(store, "encoder.final_norm", cfg.d_model);
        Ok(Encoder {
            patch_proj,
            pos_encoding: position_encoding_2d(cfg.grid(), cfg.grid(), cfg.d_model),
            blocks,
            final_norm,
            cfg,
        })
    }

    /// Non-overlapping patches, linear projection, fixed position encoding.
    /// `[b, C, H, W]` → `[b, (H/P)², d_model]`.
    pub fn patch_embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        let expect = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::Config(format!(
                "patch_embed expects [b, {}, {}, {}], got {shape:?}",
                expect[0], expect[1], expect[2]
            )));
        }
        let b = shape[0];
        let patches = tape.extract_patches(x, self.cfg.patch_size)?;
        let proj = self.patch_proj.forward(tape, store, patches, training, rng)?;
        // Tile the constant position table over the batch.
        let n = self.cfg.seq_len();
        let d = self.cfg.d_model;
        let mut tiled = Vec::with_capacity(b * n * d);
        for _ in 0..b {
            tiled.extend_from_slice(self.pos_encoding.data());
        }
        let pos = tape.constant(Tensor::new(vec![b, n, d], tiled)?);
        tape.add(proj, pos)
    }

    /// Full encoder pass: `[b, C, H, W]` → `[b, (H/P)², d_model]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let mut tokens = self.patch_embed(tape, store, x, training, rng)?;
        for block in &self.blocks {
            tokens = block.forward(tape, store, tokens, training, rng)?;
        }
        self.final_norm.forward(tape, store, tokens)
    }

    /// The adapted linear maps, in layer order.
    pub fn adapted_layers(&self) -> impl Iterator<Item = &AdaptedLinear> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.to_qkv, &b.to_out].into_iter())
    }

    pub fn adapted_layers_mut(&mut self) -> impl Iterator<Item = &mut AdaptedLinear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.to_qkv, &mut b.to_out].into_iter())
    }
}
