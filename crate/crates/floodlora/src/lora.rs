//! Low-rank adaptation of frozen linear maps.
//!
//! A linear layer `y = x·W + bias` gains a trainable branch
//! `scale · dropout(x)·B·A` with `B: [d_in, r]`, `A: [r, d_out]` and
//! `scale = α/r`. The base weight freezes when an adapter attaches; only
//! `B` and `A` train. The branch can be merged into the base weight
//! (`W ← W + scale·B·A`) for adapter-free inference and unmerged exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::wire;

/// How `B` and `A` are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `B = 0`, `A ~ U(−1/√d_in, 1/√d_in)`: the adapted layer equals the
    /// base layer exactly at step 0.
    #[default]
    ZeroB,
    /// Both factors `~ N(0, 0.02)`.
    BothRandom,
}

/// Denominator used for the branch scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `α / r` with the nominal rank — the conventional choice, and the
    /// default (the numeric rank of `B·A` is `r` almost surely anyway).
    #[default]
    NominalRank,
    /// `α / max(numrank(B·A), 1)` — study variant; the `max` keeps the
    /// zero-initialized branch (which is exactly zero) finite.
    NumericRank,
}

/// The `(B, A, r, α, dropout)` bundle for one linear map.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// Input-side factor, `[d_in, r]`.
    pub b: Tensor,
    /// Output-side factor, `[r, d_out]`.
    pub a: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub init_mode: InitMode,
    pub scale_mode: ScaleMode,
}

/// Build an adapter for a `d_in × d_out` map. Fails if `r` exceeds
/// `min(d_in, d_out)` or the dropout probability is out of range.
pub fn init_adapter(
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    dropout_p: f64,
    init_mode: InitMode,
    rng: &mut Rng,
) -> Result<LoraAdapter> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "lora rank {rank} out of range for a {d_in}×{d_out} map (1..={})",
            d_in.min(d_out)
        )));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!(
            "lora dropout must be in [0,1), got {dropout_p}"
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::Config(format!("lora alpha must be positive, got {alpha}")));
    }
    let (b, a) = match init_mode {
        InitMode::ZeroB => {
            let bound = 1.0 / (d_in as f64).sqrt();
            (
                Tensor::zeros(vec![d_in, rank]),
                Tensor::rand_uniform(vec![rank, d_out], -bound, bound, rng),
            )
        }
        InitMode::BothRandom => (
            Tensor::rand_normal(vec![d_in, rank], 0.0, 0.02, rng),
            Tensor::rand_normal(vec![rank, d_out], 0.0, 0.02, rng),
        ),
    };
    Ok(LoraAdapter {
        b,
        a,
        rank,
        alpha,
        dropout_p,
        init_mode,
        scale_mode: ScaleMode::default(),
    })
}

impl LoraAdapter {
    pub fn d_in(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[1]
    }

    /// `α / r` (nominal mode) — exact by construction.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable parameter count `r·(d_in + d_out)`.
    pub fn trainable_params(&self) -> usize {
        adapter_param_count(self.d_in(), self.d_out(), self.rank)
    }
}

/// Closed-form adapter size: `r·(d_in + d_out)`.
pub fn adapter_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * (d_in + d_out)
}

/// Numeric rank of a `rows × cols` matrix by Gaussian elimination with
/// partial pivoting; tolerance is relative to the largest pivot.
pub fn numeric_rank(data: &[f64], rows: usize, cols: usize) -> usize {
    let mut m = data.to_vec();
    let mut rank = 0;
    let mut row = 0;
    let scale = data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = scale * 1e-10 * rows.max(cols) as f64;
    for col in 0..cols {
        if row >= rows {
            break;
        }
        let (pivot_row, pivot_val) = (row..rows)
            .map(|r| (r, m[r * cols + col].abs()))
            .fold((row, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_val <= tol {
            continue;
        }
        m.swap(pivot_row * cols + col, row * cols + col);
        for c in col + 1..cols {
            m.swap(pivot_row * cols + c, row * cols + c);
        }
        for r in row + 1..rows {
            let f = m[r * cols + col] / m[row * cols + col];
            for c in col..cols {
                m[r * cols + c] -= f * m[row * cols + c];
            }
        }
        rank += 1;
        row += 1;
    }
    rank
}

/// Adapter parameters registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub b: ParamId,
    pub a: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub init_mode: InitMode,
    pub scale_mode: ScaleMode,
}

impl AdapterParams {
    /// Effective branch scale per the configured [`ScaleMode`].
    pub fn effective_scale(&self, store: &ParamStore) -> f64 {
        match self.scale_mode {
            ScaleMode::NominalRank => self.alpha / self.rank as f64,
            ScaleMode::NumericRank => {
                let b = store.get(self.b);
                let a = store.get(self.a);
                let (d_in, r) = (b.shape()[0], b.shape()[1]);
                let d_out = a.shape()[1];
                let ba = kernels::matmul(b.data(), a.data(), d_in, r, d_out);
                self.alpha / numeric_rank(&ba, d_in, d_out).max(1) as f64
            }
        }
    }
}

/// A linear map with an optional low-rank adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<AdapterParams>,
    pub merged: bool,
}

impl AdaptedLinear {
    /// Plain linear layer: weight `~ U(±1/√d_in)`, bias zero, trainable.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::rand_uniform(vec![d_in, d_out], -bound, bound, rng).with_requires_grad(true),
        );
        let bias = with_bias.then(|| {
            store.insert(
                format!("{name}.bias"),
                Tensor::zeros(vec![d_out]).with_requires_grad(true),
            )
        });
        AdaptedLinear {
            name: name.to_string(),
            d_in,
            d_out,
            weight,
            bias,
            adapter: None,
            merged: false,
        }
    }

    /// Attach an adapter, freezing the base weight and bias.
    pub fn attach_adapter(&mut self, store: &mut ParamStore, adapter: LoraAdapter) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::State(format!("{}: adapter already attached", self.name)));
        }
        if adapter.d_in() != self.d_in || adapter.d_out() != self.d_out {
            return Err(Error::ShapeMismatch {
                op: "attach_adapter",
                lhs: vec![self.d_in, self.d_out],
                rhs: vec![adapter.d_in(), adapter.d_out()],
            });
        }
        store.set_requires_grad(self.weight, false);
        if let Some(bias) = self.bias {
            store.set_requires_grad(bias, false);
        }
        let b = store.insert(
            format!("{}.lora_b", self.name),
            adapter.b.with_requires_grad(true),
        );
        let a = store.insert(
            format!("{}.lora_a", self.name),
            adapter.a.with_requires_grad(true),
        );
        self.adapter = Some(AdapterParams {
            b,
            a,
            rank: adapter.rank,
            alpha: adapter.alpha,
            dropout_p: adapter.dropout_p,
            init_mode: adapter.init_mode,
            scale_mode: adapter.scale_mode,
        });
        Ok(())
    }

    /// Copy the adapter back out of the store (for serialization).
    pub fn detach_adapter(&self, store: &ParamStore) -> Option<LoraAdapter> {
        self.adapter.as_ref().map(|ad| LoraAdapter {
            b: store.get(ad.b).clone(),
            a: store.get(ad.a).clone(),
            rank: ad.rank,
            alpha: ad.alpha,
            dropout_p: ad.dropout_p,
            init_mode: ad.init_mode,
            scale_mode: ad.scale_mode,
        })
    }

    /// `y = x·W + bias (+ scale · dropout(x)·B·A when unmerged)`.
    ///
    /// Dropout applies to the adapter-branch input only, and only in
    /// training mode; the frozen base path is always deterministic.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let d_in_actual = *tape.value(x).shape().last().unwrap_or(&0);
        if d_in_actual != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "adapted_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let w = tape.param(store, self.weight);
        let bias = self.bias.map(|b| tape.param(store, b));
        let base = tape.linear(x, w, bias)?;
        let Some(ad) = &self.adapter else {
            return Ok(base);
        };
        if self.merged {
            return Ok(base);
        }
        let branch_in = tape.dropout(x, ad.dropout_p, training, rng)?;
        let b = tape.param(store, ad.b);
        let a = tape.param(store, ad.a);
        let xb = tape.linear(branch_in, b, None)?;
        let xba = tape.linear(xb, a, None)?;
        let scaled = tape.scale(xba, ad.effective_scale(store));
        tape.add(base, scaled)
    }

    /// Fold the branch into the base weight: `W ← W + scale·B·A`.
    pub fn merge(&mut self, store: &mut ParamStore) -> Result<()> {
        let ad = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: merge without adapter", self.name)))?;
        if self.merged {
            return Err(Error::State(format!("{}: already merged", self.name)));
        }
        let delta = self.branch_delta(store, ad);
        let w = store.get_mut(self.weight);
        for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
            *wv += dv;
        }
        self.merged = true;
        Ok(())
    }

    /// Exact inverse of [`AdaptedLinear::merge`].
    pub fn unmerge(&mut self, store: &mut ParamStore) -> Result<()> {
        let ad = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: unmerge without adapter", self.name)))?;
        if !self.merged {
            return Err(Error::State(format!("{}: unmerge before merge", self.name)));
        }
        let delta = self.branch_delta(store, ad);
        let w = store.get_mut(self.weight);
        for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
            *wv -= dv;
        }
        self.merged = false;
        Ok(())
    }

    fn branch_delta(&self, store: &ParamStore, ad: &AdapterParams) -> Vec<f64> {
        let scale = ad.effective_scale(store);
        let b = store.get(ad.b);
        let a = store.get(ad.a);
        let mut delta = kernels::matmul(b.data(), a.data(), self.d_in, ad.rank, self.d_out);
        for v in &mut delta {
            *v *= scale;
        }
        delta
    }
}

// ── parameter accounting ─────────────────────────────────────────────

/// One itemized line of a [`ParamCountReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

/// Per-parameter breakdown of trainable vs frozen counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub strategy: String,
    pub rows: Vec<ParamCountRow>,
    pub total: usize,
    pub trainable: usize,
}

/// Itemize every parameter in `store`; trainability is read off the
/// tensors, so the report reflects the active strategy.
pub fn count_trainable(store: &ParamStore, strategy: &str) -> ParamCountReport {
    let mut rows = Vec::with_capacity(store.len());
    let mut total = 0;
    let mut trainable = 0;
    for id in store.ids() {
        let t = store.get(id);
        rows.push(ParamCountRow {
            name: store.name(id).to_string(),
            count: t.numel(),
            trainable: t.requires_grad,
        });
        total += t.numel();
        if t.requires_grad {
            trainable += t.numel();
        }
    }
    ParamCountReport {
        strategy: strategy.to_string(),
        rows,
        total,
        trainable,
    }
}

// ── adapter checkpoint format ────────────────────────────────────────
//
// magic "FLRA", u16 version, u32 manifest length, manifest JSON
// (d_in, d_out, r, alpha, dropout_p, init_mode), then raw 64-bit
// little-endian B followed by A.

const ADAPTER_MAGIC: &[u8; 4] = b"FLRA";
const ADAPTER_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AdapterManifest {
    d_in: usize,
    d_out: usize,
    r: usize,
    alpha: f64,
    dropout_p: f64,
    init_mode: InitMode,
}

/// Serialize one adapter to `path`.
pub fn write_adapter(path: &Path, adapter: &LoraAdapter) -> Result<()> {
    let manifest = AdapterManifest {
        d_in: adapter.d_in(),
        d_out: adapter.d_out(),
        r: adapter.rank,
        alpha: adapter.alpha,
        dropout_p: adapter.dropout_p,
        init_mode: adapter.init_mode,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(ADAPTER_MAGIC).map_err(|e| Error::io(path, e))?;
    wire::write_u16(&mut w, ADAPTER_VERSION, path)?;
    wire::write_u32(&mut w, json.len() as u32, path)?;
    w.write_all(&json).map_err(|e| Error::io(path, e))?;
    wire::write_f64_slice(&mut w, adapter.b.data(), path)?;
    wire::write_f64_slice(&mut w, adapter.a.data(), path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an adapter written by [`write_adapter`].
pub fn read_adapter(path: &Path) -> Result<LoraAdapter> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    wire::expect_magic(&mut r, ADAPTER_MAGIC, path)?;
    let version = wire::read_u16(&mut r, path, "version")?;
    if version != ADAPTER_VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let json_len = wire::read_u32(&mut r, path, "manifest length")? as usize;
    let mut json = vec![0u8; json_len];
    wire::read_exact(&mut r, &mut json, path, "manifest")?;
    let m: AdapterManifest = serde_json::from_slice(&json)
        .map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    let b = wire::read_f64_vec(&mut r, m.d_in * m.r, path, "lora B")?;
    let a = wire::read_f64_vec(&mut r, m.r * m.d_out, path, "lora A")?;
    Ok(LoraAdapter {
        b: Tensor::new(vec![m.d_in, m.r], b)?,
        a: Tensor::new(vec![m.r, m.d_out], a)?,
        rank: m.r,
        alpha: m.alpha,
        dropout_p: m.dropout_p,
        init_mode: m.init_mode,
        scale_mode: ScaleMode::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, stream_rng};

    fn layer_with_adapter(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        init_mode: InitMode,
        seed: u64,
    ) -> (ParamStore, AdaptedLinear) {
        let mut rng = stream_rng(seed, stream::INIT);
        let mut store = ParamStore::new();
        let mut layer = AdaptedLinear::new(&mut store, "layer", d_in, d_out, true, &mut rng);
        let adapter = init_adapter(d_in, d_out, rank, alpha, 0.1, init_mode, &mut rng).unwrap();
        layer.attach_adapter(&mut store, adapter).unwrap();
        (store, layer)
    }

    fn eval_forward(store: &ParamStore, layer: &AdaptedLinear, x: &Tensor) -> Vec<f64> {
        let mut rng = stream_rng(0, stream::DROPOUT);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let y = layer.forward(&mut tape, store, xid, false, &mut rng).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let mut rng = stream_rng(0, stream::INIT);
        let err = init_adapter(4, 6, 5, 8.0, 0.0, InitMode::ZeroB, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(init_adapter(4, 6, 4, 8.0, 0.0, InitMode::ZeroB, &mut rng).is_ok());
    }

    #[test]
    fn zero_b_forward_equals_base_exactly() {
        let (store, layer) = layer_with_adapter(6, 4, 2, 4.0, InitMode::ZeroB, 1);
        let mut rng = stream_rng(2, stream::INIT);
        let x = Tensor::rand_uniform(vec![3, 6], -1.0, 1.0, &mut rng);

        // Base-only forward: same layer without the adapter branch.
        let mut plain = layer.clone();
        plain.adapter = None;
        assert_eq!(eval_forward(&store, &layer, &x), eval_forward(&store, &plain, &x));
    }

    #[test]
    fn both_random_is_deterministic_per_seed() {
        let mk = || {
            let mut rng = stream_rng(42, stream::INIT);
            init_adapter(5, 7, 3, 6.0, 0.1, InitMode::BothRandom, &mut rng).unwrap()
        };
        let (x, y) = (mk(), mk());
        assert_eq!(x.b.data(), y.b.data());
        assert_eq!(x.a.data(), y.a.data());
    }

    #[test]
    fn hand_expanded_branch_value() {
        // W = I₂, rank 1, α = 2 → scale 2. Factors chosen so the branch
        // contributes [3, 0] on x = [1, 2]: x·B = 3, ·A = [3, 0].
        let mut store = ParamStore::new();
        let weight = store.insert(
            "l.weight",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let b = store.insert("l.lora_b", Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let a = store.insert("l.lora_a", Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let layer = AdaptedLinear {
            name: "l".into(),
            d_in: 2,
            d_out: 2,
            weight,
            bias: None,
            adapter: Some(AdapterParams {
                b,
                a,
                rank: 1,
                alpha: 2.0,
                dropout_p: 0.5, // must not matter in eval mode
                init_mode: InitMode::ZeroB,
                scale_mode: ScaleMode::NominalRank,
            }),
            merged: false,
        };
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = eval_forward(&store, &layer, &x);
        assert_eq!(y, vec![7.0, 2.0]); // base [1,2] + 2·[3,0]
    }

    #[test]
    fn eval_output_independent_of_dropout_p() {
        let (store, mut layer) = layer_with_adapter(4, 4, 2, 4.0, InitMode::BothRandom, 3);
        let mut rng = stream_rng(5, stream::INIT);
        let x = Tensor::rand_uniform(vec![2, 4], -1.0, 1.0, &mut rng);
        let y0 = eval_forward(&store, &layer, &x);
        layer.adapter.as_mut().unwrap().dropout_p = 0.9;
        assert_eq!(y0, eval_forward(&store, &layer, &x));
    }

    #[test]
    fn merge_matches_adapted_forward_and_unmerge_restores() {
        for seed in 0..20 {
            let (mut store, mut layer) =
                layer_with_adapter(5, 3, 2, 4.0, InitMode::BothRandom, seed);
            let mut rng = stream_rng(seed + 100, stream::INIT);
            let x = Tensor::rand_uniform(vec![4, 5], -1.0, 1.0, &mut rng);
            let before = eval_forward(&store, &layer, &x);
            let w_before = store.get(layer.weight).data().to_vec();

            layer.merge(&mut store).unwrap();
            let merged = eval_forward(&store, &layer, &x);
            let max = before
                .iter()
                .zip(&merged)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(max < 1e-9, "seed {seed}: merge drift {max}");

            layer.unmerge(&mut store).unwrap();
            let w_after = store.get(layer.weight).data();
            let drift = w_before
                .iter()
                .zip(w_after)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(drift < 1e-12, "seed {seed}: unmerge drift {drift}");
        }
    }

    #[test]
    fn zero_b_merge_is_noop_on_weights() {
        let (mut store, mut layer) = layer_with_adapter(4, 4, 2, 4.0, InitMode::ZeroB, 9);
        let before = store.get(layer.weight).data().to_vec();
        layer.merge(&mut store).unwrap();
        assert_eq!(store.get(layer.weight).data(), before.as_slice());
    }

    #[test]
    fn double_merge_and_stray_unmerge_error() {
        let (mut store, mut layer) = layer_with_adapter(4, 4, 2, 4.0, InitMode::BothRandom, 11);
        assert!(matches!(layer.unmerge(&mut store), Err(Error::State(_))));
        layer.merge(&mut store).unwrap();
        assert!(matches!(layer.merge(&mut store), Err(Error::State(_))));
    }

    #[test]
    fn attach_freezes_base_weight() {
        let (store, layer) = layer_with_adapter(4, 4, 2, 4.0, InitMode::ZeroB, 13);
        assert!(!store.get(layer.weight).requires_grad);
        assert!(!store.get(layer.bias.unwrap()).requires_grad);
        let ad = layer.adapter.as_ref().unwrap();
        assert!(store.get(ad.b).requires_grad);
        assert!(store.get(ad.a).requires_grad);
    }

    #[test]
    fn rescaling_factors_leaves_branch_invariant() {
        // (B, A) → (cB, A/c) must not change the eval-mode output.
        for seed in 0..10 {
            let (mut store, layer) = layer_with_adapter(5, 4, 2, 4.0, InitMode::BothRandom, seed);
            let mut rng = stream_rng(seed + 50, stream::INIT);
            let x = Tensor::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng);
            let y0 = eval_forward(&store, &layer, &x);
            let c = 3.7;
            let ad = layer.adapter.as_ref().unwrap();
            for v in store.get_mut(ad.b).data_mut() {
                *v *= c;
            }
            for v in store.get_mut(ad.a).data_mut() {
                *v /= c;
            }
            let y1 = eval_forward(&store, &layer, &x);
            let max = y0
                .iter()
                .zip(&y1)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(max < 1e-9, "seed {seed}: rescale drift {max}");
        }
    }

    #[test]
    fn param_count_formula() {
        // Single adapted matrix at the wide preset: 8·(768+2304) = 24576.
        assert_eq!(adapter_param_count(768, 2304, 8), 24_576);
        // Monotone in rank.
        for r in 1..10 {
            assert!(adapter_param_count(64, 192, r) < adapter_param_count(64, 192, r + 1));
        }
        let mut rng = stream_rng(0, stream::INIT);
        let ad = init_adapter(64, 192, 4, 8.0, 0.0, InitMode::ZeroB, &mut rng).unwrap();
        assert_eq!(ad.trainable_params(), 1024);
        assert_eq!(ad.b.numel() + ad.a.numel(), ad.trainable_params());
    }

    #[test]
    fn numeric_rank_behaves() {
        // Random rank-2 product has numeric rank 2.
        let mut rng = stream_rng(21, stream::INIT);
        let b = Tensor::rand_normal(vec![6, 2], 0.0, 1.0, &mut rng);
        let a = Tensor::rand_normal(vec![2, 5], 0.0, 1.0, &mut rng);
        let ba = kernels::matmul(b.data(), a.data(), 6, 2, 5);
        assert_eq!(numeric_rank(&ba, 6, 5), 2);
        assert_eq!(numeric_rank(&vec![0.0; 30], 6, 5), 0);
    }

    #[test]
    fn numeric_scale_mode_matches_nominal_for_full_rank_factors() {
        let (mut store, mut layer) = layer_with_adapter(6, 5, 2, 4.0, InitMode::BothRandom, 17);
        let mut rng = stream_rng(18, stream::INIT);
        let x = Tensor::rand_uniform(vec![2, 6], -1.0, 1.0, &mut rng);
        let y_nominal = eval_forward(&store, &layer, &x);
        layer.adapter.as_mut().unwrap().scale_mode = ScaleMode::NumericRank;
        let y_numeric = eval_forward(&store, &layer, &x);
        let max = y_nominal
            .iter()
            .zip(&y_numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max < 1e-9, "numeric-rank scale diverged: {max}");
        // Zero branch stays finite in numeric mode.
        let ad = layer.adapter.as_ref().unwrap();
        for v in store.get_mut(ad.b).data_mut() {
            *v = 0.0;
        }
        let y_zero = eval_forward(&store, &layer, &x);
        assert!(y_zero.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adapter_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.flra");
        let mut rng = stream_rng(7, stream::INIT);
        let ad = init_adapter(6, 4, 2, 4.0, 0.1, InitMode::BothRandom, &mut rng).unwrap();
        write_adapter(&path, &ad).unwrap();
        let back = read_adapter(&path).unwrap();
        assert_eq!(back.b.data(), ad.b.data());
        assert_eq!(back.a.data(), ad.a.data());
        assert_eq!(back.rank, 2);
        assert_eq!(back.alpha, 4.0);
        assert_eq!(back.init_mode, InitMode::BothRandom);
    }

    #[test]
    fn adapter_gradients_flow_only_to_factors() {
        let (store, layer) = layer_with_adapter(4, 3, 2, 4.0, InitMode::BothRandom, 23);
        let mut rng = stream_rng(24, stream::DROPOUT);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::rand_uniform(vec![2, 4], -1.0, 1.0, &mut rng));
        let y = layer.forward(&mut tape, &store, x, false, &mut rng).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let ad = layer.adapter.as_ref().unwrap();
        let mut store = store;
        tape.write_param_grads(&mut store);
        assert!(store.get(ad.b).grad.is_some());
        assert!(store.get(ad.a).grad.is_some());
        assert!(store.get(layer.weight).grad.is_none());
    }
}
