//! Segmentation decoder: two convolutions, three stride-2 transposed
//! convolutions (spatial ×8), per-snapshot; channel-concatenated outputs go
//! through a final fusion convolution producing single-channel logits.

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// Forward conv, kernel `[oc, ic, k, k]` `~ U(±1/√(ic·k²))`, zero bias
    /// (a biased draw can kill an entire low-channel ReLU stage).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        ConvLayer {
            kernel: store.insert(
                format!("{name}.kernel"),
                Tensor::rand_uniform(vec![out_c, in_c, k, k], -bound, bound, rng)
                    .with_requires_grad(true),
            ),
            bias: store.insert(
                format!("{name}.bias"),
                Tensor::zeros(vec![out_c]).with_requires_grad(true),
            ),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k, self.stride, self.pad)?;
        tape.add_channel_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct DeconvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl DeconvLayer {
    /// Transposed conv, kernel `[ic, oc, k, k]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        DeconvLayer {
            kernel: store.insert(
                format!("{name}.kernel"),
                Tensor::rand_uniform(vec![in_c, out_c, k, k], -bound, bound, rng)
                    .with_requires_grad(true),
            ),
            bias: store.insert(
                format!("{name}.bias"),
                Tensor::zeros(vec![out_c]).with_requires_grad(true),
            ),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.deconv2d(x, k, self.stride, self.pad)?;
        tape.add_channel_bias(y, b)
    }
}

/// Channel taper: `d → d/2 → d/4` through the convs, then each stride-2
/// deconv halves channels again down to `d/32`; two snapshots concatenate
/// to `2·(d/32)` channels before the 3×3 fusion conv emits one logit plane.
#[derive(Debug, Clone)]
pub struct SegDecoder {
    pub d_model: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub deconv1: DeconvLayer,
    pub deconv2: DeconvLayer,
    pub deconv3: DeconvLayer,
    pub fusion: ConvLayer,
}

impl SegDecoder {
    pub fn new(store: &mut ParamStore, d_model: usize, rng: &mut Rng) -> Result<Self> {
        if d_model % 32 != 0 {
            return Err(Error::Config(format!(
                "decoder channel taper needs d_model divisible by 32, got {d_model}"
            )));
        }
        let d = d_model;
        Ok(SegDecoder {
            d_model,
            conv1: ConvLayer::new(store, "decoder.conv1", d / 2, d, 3, 1, 1, rng),
            conv2: ConvLayer::new(store, "decoder.conv2", d / 4, d / 2, 3, 1, 1, rng),
            deconv1: DeconvLayer::new(store, "decoder.deconv1", d / 4, d / 8, 2, 2, 0, rng),
            deconv2: DeconvLayer::new(store, "decoder.deconv2", d / 8, d / 16, 2, 2, 0, rng),
            deconv3: DeconvLayer::new(store, "decoder.deconv3", d / 16, d / 32, 2, 2, 0, rng),
            fusion: ConvLayer::new(store, "decoder.fusion", 1, 2 * (d / 32), 3, 1, 1, rng),
        })
    }

    /// One snapshot: tokens `[b, g², d]` → features `[b, d/32, 8g, 8g]`.
    pub fn decode_single(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: NodeId,
        grid: usize,
    ) -> Result<NodeId> {
        let shape = tape.value(tokens).shape().to_vec();
        if shape.len() != 3 || shape[1] != grid * grid || shape[2] != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "decode_single",
                lhs: shape,
                rhs: vec![grid * grid, self.d_model],
            });
        }
        let b = shape[0];
        let x = tape.reshape(tokens, vec![b, grid, grid, self.d_model])?;
        let x = tape.permute(x, &[0, 3, 1, 2])?; // [b, d, g, g]

        let x = self.conv1.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.deconv1.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.deconv2.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.deconv3.forward(tape, store, x)?;
        Ok(tape.relu(x))
    }

    /// Decode both snapshots independently, concatenate along channels and
    /// fuse to logits `[b, 1, 8g, 8g]`. Order-sensitive by construction.
    pub fn decode_and_fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_pre: NodeId,
        z_post: NodeId,
        grid: usize,
    ) -> Result<NodeId> {
        if tape.value(z_pre).shape() != tape.value(z_post).shape() {
            return Err(Error::ShapeMismatch {
                op: "decode_and_fuse",
                lhs: tape.value(z_pre).shape().to_vec(),
                rhs: tape.value(z_post).shape().to_vec(),
            });
        }
        let pre = self.decode_single(tape, store, z_pre, grid)?;
        let post = self.decode_single(tape, store, z_post, grid)?;
        let both = tape.concat_channels(&[pre, post])?;
        self.fusion.forward(tape, store, both)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, stream_rng};

    fn build(d: usize, seed: u64) -> (ParamStore, SegDecoder) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, stream::INIT);
        let dec = SegDecoder::new(&mut store, d, &mut rng).unwrap();
        (store, dec)
    }

    #[test]
    fn rejects_untaperable_width() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, stream::INIT);
        assert!(SegDecoder::new(&mut store, 48, &mut rng).is_err());
    }

    #[test]
    fn upsamples_grid_by_eight() {
        let (store, dec) = build(64, 1);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::rand_uniform(
            vec![2, 64, 64],
            -1.0,
            1.0,
            &mut stream_rng(2, stream::INIT),
        ));
        let logits = dec.decode_and_fuse(&mut tape, &store, z, z, 8).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 1, 64, 64]);
    }

    #[test]
    fn fusion_is_order_sensitive() {
        let (store, dec) = build(32, 3);
        let mut rng = stream_rng(4, stream::INIT);
        let a = Tensor::rand_uniform(vec![1, 16, 32], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![1, 16, 32], -1.0, 1.0, &mut rng);

        let run = |first: &Tensor, second: &Tensor| {
            let mut tape = Tape::new();
            let f = tape.constant(first.clone());
            let s = tape.constant(second.clone());
            let out = dec.decode_and_fuse(&mut tape, &store, f, s, 4).unwrap();
            tape.value(out).data().to_vec()
        };
        let fwd = run(&a, &b);
        let rev = run(&b, &a);
        let max_diff = fwd
            .iter()
            .zip(&rev)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_diff > 1e-9, "swapping snapshots did not change logits");
    }

    #[test]
    fn mismatched_snapshots_error() {
        let (store, dec) = build(32, 5);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![1, 16, 32]));
        let b = tape.constant(Tensor::zeros(vec![2, 16, 32]));
        assert!(dec.decode_and_fuse(&mut tape, &store, a, b, 4).is_err());
    }
}
