//! Elementwise, structural and reduction ops.
//!
//! Backward closures own the incoming gradient buffer; single-consumer ops
//! mutate or forward it in place rather than copying.

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;

impl Tape {
    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(a) && sink.wants(b) {
                    sink.accumulate(a, g.clone());
                    sink.accumulate(b, g);
                } else if sink.wants(a) {
                    sink.accumulate(a, g);
                } else if sink.wants(b) {
                    sink.accumulate(b, g);
                }
            }),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(a) {
                    sink.accumulate(a, g.clone());
                }
                if sink.wants(b) {
                    for v in &mut g {
                        *v = -*v;
                    }
                    sink.accumulate(b, g);
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires(a) || self.requires(b);
        let da = ta.data_arc();
        let db = tb.data_arc();
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(b) {
                    sink.accumulate(b, g.iter().zip(da.iter()).map(|(g, x)| g * x).collect());
                }
                if sink.wants(a) {
                    for (v, y) in g.iter_mut().zip(db.iter()) {
                        *v *= y;
                    }
                    sink.accumulate(a, g);
                }
            }),
        ))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("div", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires(a) || self.requires(b);
        let da = ta.data_arc();
        let db = tb.data_arc();
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(b) {
                    sink.accumulate(
                        b,
                        g.iter()
                            .zip(da.iter().zip(db.iter()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
                if sink.wants(a) {
                    for (v, y) in g.iter_mut().zip(db.iter()) {
                        *v /= y;
                    }
                    sink.accumulate(a, g);
                }
            }),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let dx = tx.data_arc();
        let requires = self.requires(x);
        self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(x) {
                    for (v, xv) in g.iter_mut().zip(dx.iter()) {
                        if *xv <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    sink.accumulate(x, g);
                }
            }),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        // Branch on sign so exp never overflows.
        let data: Vec<f64> = tx
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let y = out.data_arc();
        let requires = self.requires(x);
        self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(x) {
                    for (v, yv) in g.iter_mut().zip(y.iter()) {
                        *v *= yv * (1.0 - yv);
                    }
                    sink.accumulate(x, g);
                }
            }),
        )
    }

    /// Natural log; caller guarantees strictly positive inputs.
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v.ln()).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let dx = tx.data_arc();
        let requires = self.requires(x);
        self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(x) {
                    for (v, xv) in g.iter_mut().zip(dx.iter()) {
                        *v /= xv;
                    }
                    sink.accumulate(x, g);
                }
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let dx = tx.data_arc();
        let requires = self.requires(x);
        self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(x) {
                    for (v, xv) in g.iter_mut().zip(dx.iter()) {
                        if *xv < lo || *xv > hi {
                            *v = 0.0;
                        }
                    }
                    sink.accumulate(x, g);
                }
            }),
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let requires = self.requires(x);
        self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(x) {
                    for v in &mut g {
                        *v *= c;
                    }
                    sink.accumulate(x, g);
                }
            }),
        )
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let tx = self.value(x);
        let data: Vec<f64> = tx.data().iter().map(|v| v + c).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let requires = self.requires(x);
        self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate(x, g);
                }
            }),
        )
    }

    /// Softmax over the last extent, max-subtracted for stability.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let cols = *tx.shape().last().expect("softmax needs at least one axis");
        let rows = tx.numel() / cols;
        let data = crate::kernels::softmax_rows(tx.data(), rows, cols);
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let y = out.data_arc();
        let requires = self.requires(x);
        self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(x) {
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &mut g[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs.iter()).map(|(y, g)| y * g).sum();
                        for (gv, yv) in gs.iter_mut().zip(ys) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    sink.accumulate(x, g);
                }
            }),
        )
    }

    /// Inverted dropout: in training mode survivors scale by `1/(1-p)`; in
    /// eval mode this is the identity (the input node is returned as-is).
    pub fn dropout(&mut self, x: NodeId, p: f64, training: bool, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| {
                if rng.random_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let requires = self.requires(x);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |mut g, sink| {
                if sink.wants(x) {
                    for (v, m) in g.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    sink.accumulate(x, g);
                }
            }),
        ))
    }

    /// Layer normalization over the last extent with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let tx = self.value(x);
        let cols = *tx.shape().last().expect("layer_norm needs at least one axis");
        if self.value(gamma).shape() != [cols] || self.value(beta).shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = tx.numel() / cols;
        let gdat = self.value(gamma).data_arc();
        let bdat = self.value(beta).data_arc();

        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let xh = (row[c] - mean) * istd;
                xhat[r * cols + c] = xh;
                data[r * cols + c] = gdat[c] * xh + bdat[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(gamma) {
                    sink.accumulate_with(gamma, cols, |dg| {
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    });
                }
                if sink.wants(beta) {
                    sink.accumulate_with(beta, cols, |db| {
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g[r * cols + c];
                            }
                        }
                    });
                }
                if sink.wants(x) {
                    let mut dx = g;
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for c in 0..cols {
                            let dy = dx[base + c] * gdat[c];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat[base + c];
                        }
                        mean_dy /= cols as f64;
                        mean_dy_xhat /= cols as f64;
                        for c in 0..cols {
                            let dy = dx[base + c] * gdat[c];
                            dx[base + c] =
                                inv_std[r] * (dy - mean_dy - xhat[base + c] * mean_dy_xhat);
                        }
                    }
                    sink.accumulate(x, dx);
                }
            }),
        ))
    }

    /// Mean squared error between two same-shape tensors → scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.numel() as f64;
        let value = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let da = ta.data_arc();
        let db = tb.data_arc();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push_op(
            Tensor::scalar(value),
            requires,
            Box::new(move |g, sink| {
                let scale = 2.0 * g[0] / n;
                if sink.wants(a) {
                    sink.accumulate(
                        a,
                        da.iter().zip(db.iter()).map(|(x, y)| scale * (x - y)).collect(),
                    );
                }
                if sink.wants(b) {
                    sink.accumulate(
                        b,
                        da.iter().zip(db.iter()).map(|(x, y)| -scale * (x - y)).collect(),
                    );
                }
            }),
        ))
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let n = tx.numel();
        let value = tx.data().iter().sum();
        let requires = self.requires(x);
        self.push_op(
            Tensor::scalar(value),
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate(x, vec![g[0]; n]);
                }
            }),
        )
    }

    /// Mean of all elements → scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let n = tx.numel();
        let value = tx.data().iter().sum::<f64>() / n as f64;
        let requires = self.requires(x);
        self.push_op(
            Tensor::scalar(value),
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate(x, vec![g[0] / n as f64; n]);
                }
            }),
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        let requires = self.requires(x);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate(x, g);
                }
            }),
        ))
    }

    /// Reorder axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        let ndim = tx.ndim();
        let mut seen = vec![false; ndim];
        if axes.len() != ndim
            || axes.iter().any(|&a| a >= ndim || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Config(format!(
                "permute axes {axes:?} is not a permutation of 0..{ndim}"
            )));
        }
        let in_shape = tx.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = Tensor::strides(&in_shape);
        // Source stride per output axis.
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = tx.numel();
        let src = tx.data();
        let mut data = vec![0.0; n];
        walk_permuted(&out_shape, &src_strides, |dst, s| data[dst] = src[s]);
        let out = Tensor::new(out_shape.clone(), data)?;
        let requires = self.requires(x);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate_with(x, n, |dx| {
                        walk_permuted(&out_shape, &src_strides, |dst, s| dx[s] += g[dst]);
                    });
                }
            }),
        ))
    }

    /// Split the last extent into three equal parts.
    pub fn chunk3(&mut self, x: NodeId) -> Result<[NodeId; 3]> {
        let tx = self.value(x);
        let cols = *tx.shape().last().expect("chunk3 needs at least one axis");
        if cols % 3 != 0 {
            return Err(Error::Config(format!(
                "chunk3 requires the last extent divisible by 3, got {cols}"
            )));
        }
        let part = cols / 3;
        let rows = tx.numel() / cols;
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = part;
        let src = tx.data_arc();
        let requires = self.requires(x);
        let numel = tx.numel();
        let mut ids = [NodeId(0); 3];
        for (k, slot) in ids.iter_mut().enumerate() {
            let mut data = vec![0.0; rows * part];
            for r in 0..rows {
                data[r * part..(r + 1) * part]
                    .copy_from_slice(&src[r * cols + k * part..r * cols + (k + 1) * part]);
            }
            let out = Tensor::new(shape.clone(), data)?;
            *slot = self.push_op(
                out,
                requires,
                Box::new(move |g, sink| {
                    if sink.wants(x) {
                        sink.accumulate_with(x, numel, |dx| {
                            for r in 0..rows {
                                for c in 0..part {
                                    dx[r * cols + k * part + c] += g[r * part + c];
                                }
                            }
                        });
                    }
                }),
            );
        }
        Ok(ids)
    }

    fn concat_axis(&mut self, parts: &[NodeId], axis: usize, op: &'static str) -> Result<NodeId> {
        assert!(!parts.is_empty(), "{op}: empty part list");
        let first = self.value(parts[0]).shape().to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        // View every tensor as [outer, axis_extent, inner].
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offsets = Vec::with_capacity(parts.len());
        let mut written = 0;
        for &p in parts {
            let t = self.value(p);
            let extent = t.shape()[axis];
            let block = extent * inner;
            for o in 0..outer {
                let dst = o * axis_total * inner + written * inner;
                data[dst..dst + block].copy_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
            offsets.push((p, written, extent, t.numel()));
            written += extent;
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                for (p, offset, extent, numel) in offsets {
                    if !sink.wants(p) {
                        continue;
                    }
                    let block = extent * inner;
                    sink.accumulate_with(p, numel, |dp| {
                        for o in 0..outer {
                            let src = o * axis_total * inner + offset * inner;
                            for i in 0..block {
                                dp[o * block + i] += g[src + i];
                            }
                        }
                    });
                }
            }),
        ))
    }

    /// Concatenate along the last extent (inverse of [`Tape::chunk3`]).
    pub fn concat_lastdim(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let axis = self.value(parts[0]).ndim() - 1;
        self.concat_axis(parts, axis, "concat_lastdim")
    }

    /// Concatenate `[b,c,h,w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if self.value(parts[0]).ndim() != 4 {
            return Err(Error::Config("concat_channels expects 4-d tensors".into()));
        }
        self.concat_axis(parts, 1, "concat_channels")
    }

    /// Broadcast-add a `[d]` bias over the last extent.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let tb = self.value(bias);
        let cols = *tx.shape().last().expect("add_bias needs at least one axis");
        if tb.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let rows = tx.numel() / cols;
        let bdat = tb.data_arc();
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bdat[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let requires = self.requires(x) || self.requires(bias);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(bias) {
                    sink.accumulate_with(bias, cols, |db| {
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g[r * cols + c];
                            }
                        }
                    });
                }
                if sink.wants(x) {
                    sink.accumulate(x, g);
                }
            }),
        ))
    }

    /// Broadcast-add a `[c]` bias over the channel axis of `[b,c,h,w]`.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let tb = self.value(bias);
        if tx.ndim() != 4 || tb.shape() != [tx.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let plane = h * w;
        let bdat = tb.data_arc();
        let mut data = tx.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    data[base + i] += bdat[ci];
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let requires = self.requires(x) || self.requires(bias);
        Ok(self.push_op(
            out,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(bias) {
                    sink.accumulate_with(bias, c, |db| {
                        for bi in 0..b {
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                for i in 0..plane {
                                    db[ci] += g[base + i];
                                }
                            }
                        }
                    });
                }
                if sink.wants(x) {
                    sink.accumulate(x, g);
                }
            }),
        ))
    }
}

/// Odometer walk over `out_shape` in row-major order, calling
/// `visit(dst, src)` with `src` advanced by `src_strides` — no per-element
/// division.
fn walk_permuted(out_shape: &[usize], src_strides: &[usize], mut visit: impl FnMut(usize, usize)) {
    let ndim = out_shape.len();
    let n: usize = out_shape.iter().product();
    let mut coord = vec![0usize; ndim];
    let mut s = 0usize;
    for dst in 0..n {
        visit(dst, s);
        for axis in (0..ndim).rev() {
            coord[axis] += 1;
            s += src_strides[axis];
            if coord[axis] < out_shape[axis] {
                break;
            }
            coord[axis] = 0;
            s -= src_strides[axis] * out_shape[axis];
        }
    }
}
