//! Matrix products, convolutions and patch extraction.

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

impl Tape {
    /// `a[m,k] · b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[1];
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let da = ta.data_arc();
        let db = tb.data_arc();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push_op(
            Tensor::new(vec![m, n], data)?,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(a) {
                    sink.accumulate(a, kernels::matmul_nt(&g, &db, m, n, k));
                }
                if sink.wants(b) {
                    sink.accumulate(b, kernels::matmul_tn(&da, &g, m, k, n));
                }
            }),
        ))
    }

    /// Batched matmul: `a[..., m, k] · b[..., k, n]` with equal leading dims.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let nd = ta.ndim();
        let ok = nd >= 2
            && tb.ndim() == nd
            && ta.shape()[..nd - 2] == tb.shape()[..nd - 2]
            && ta.shape()[nd - 1] == tb.shape()[nd - 2];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k) = (ta.shape()[nd - 2], ta.shape()[nd - 1]);
        let n = tb.shape()[nd - 1];
        let batches: usize = ta.shape()[..nd - 2].iter().product();
        let mut out_shape = ta.shape().to_vec();
        out_shape[nd - 2] = m;
        out_shape[nd - 1] = n;

        let mut data = vec![0.0; batches * m * n];
        for l in 0..batches {
            let slice = kernels::matmul(
                &ta.data()[l * m * k..(l + 1) * m * k],
                &tb.data()[l * k * n..(l + 1) * k * n],
                m,
                k,
                n,
            );
            data[l * m * n..(l + 1) * m * n].copy_from_slice(&slice);
        }
        let da = ta.data_arc();
        let db = tb.data_arc();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push_op(
            Tensor::new(out_shape, data)?,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(a) {
                    let mut dx = vec![0.0; batches * m * k];
                    for l in 0..batches {
                        let part = kernels::matmul_nt(
                            &g[l * m * n..(l + 1) * m * n],
                            &db[l * k * n..(l + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                        dx[l * m * k..(l + 1) * m * k].copy_from_slice(&part);
                    }
                    sink.accumulate(a, dx);
                }
                if sink.wants(b) {
                    let mut dy = vec![0.0; batches * k * n];
                    for l in 0..batches {
                        let part = kernels::matmul_tn(
                            &da[l * m * k..(l + 1) * m * k],
                            &g[l * m * n..(l + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                        dy[l * k * n..(l + 1) * k * n].copy_from_slice(&part);
                    }
                    sink.accumulate(b, dy);
                }
            }),
        ))
    }

    /// `x[..., d_in] · w[d_in, d_out] (+ bias[d_out])`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let tx = self.value(x);
        let tw = self.value(w);
        let d_in = *tx.shape().last().ok_or_else(|| Error::Config("linear on 0-d tensor".into()))?;
        if tw.ndim() != 2 || tw.shape()[0] != d_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let d_out = tw.shape()[1];
        let rows = tx.numel() / d_in;
        let mut out_shape = tx.shape().to_vec();
        *out_shape.last_mut().unwrap() = d_out;

        let flat = self.reshape(x, vec![rows, d_in])?;
        let prod = self.matmul(flat, w)?;
        let shaped = self.reshape(prod, out_shape)?;
        match bias {
            Some(b) => self.add_bias(shaped, b),
            None => Ok(shaped),
        }
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let tx = self.value(x);
        let tk = self.value(kernel);
        if tx.ndim() != 4 || tk.ndim() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be ≥ 1")));
        }
        let (batch, in_c, in_h, in_w) =
            (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        // conv kernel: [oc, ic, kh, kw]; deconv kernel: [ic, oc, kh, kw].
        let (k0, k1, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        let (out_c, kern_in) = if transposed { (k1, k0) } else { (k0, k1) };
        if kern_in != in_c {
            return Err(Error::ShapeMismatch {
                op,
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (out_h, out_w) = if transposed {
            let oh = ((in_h - 1) * stride + kh) as isize - 2 * pad as isize;
            let ow = ((in_w - 1) * stride + kw) as isize - 2 * pad as isize;
            if oh < 1 || ow < 1 {
                return Err(Error::Config(format!(
                    "{op}: non-positive output extent {oh}×{ow} from input {in_h}×{in_w}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
                )));
            }
            (oh as usize, ow as usize)
        } else {
            let num_h = in_h as isize + 2 * pad as isize - kh as isize;
            let num_w = in_w as isize + 2 * pad as isize - kw as isize;
            if num_h < 0 || num_w < 0 {
                return Err(Error::Config(format!(
                    "{op}: non-positive output extent from input {in_h}×{in_w}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
                )));
            }
            (
                num_h as usize / stride + 1,
                num_w as usize / stride + 1,
            )
        };
        Ok(ConvGeom {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad,
        })
    }

    /// 2-d convolution (cross-correlation), kernel `[oc, ic, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let geom = self.conv_geom("conv2d", x, kernel, stride, pad, false)?;
        let tx = self.value(x);
        let tk = self.value(kernel);
        let data = kernels::conv2d_fwd(tx.data(), tk.data(), &geom);
        let dx_src = tx.data_arc();
        let dk_src = tk.data_arc();
        let requires = self.requires(x) || self.requires(kernel);
        Ok(self.push_op(
            Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], data)?,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate(x, kernels::conv2d_dx(&g, &dk_src, &geom));
                }
                if sink.wants(kernel) {
                    sink.accumulate(kernel, kernels::conv2d_dk(&dx_src, &g, &geom));
                }
            }),
        ))
    }

    /// Transposed 2-d convolution, kernel `[ic, oc, kh, kw]`.
    pub fn deconv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom("deconv2d", x, kernel, stride, pad, true)?;
        let tx = self.value(x);
        let tk = self.value(kernel);
        let data = kernels::deconv2d_fwd(tx.data(), tk.data(), &geom);
        let dx_src = tx.data_arc();
        let dk_src = tk.data_arc();
        let requires = self.requires(x) || self.requires(kernel);
        Ok(self.push_op(
            Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], data)?,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate(x, kernels::deconv2d_dx(&g, &dk_src, &geom));
                }
                if sink.wants(kernel) {
                    sink.accumulate(kernel, kernels::deconv2d_dk(&dx_src, &g, &geom));
                }
            }),
        ))
    }

    /// Cut `[b,C,H,W]` into non-overlapping `p×p` patches →
    /// `[b, (H/p)·(W/p), C·p·p]`, patches in row-major grid order and
    /// channel-major within a patch.
    pub fn extract_patches(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.ndim() != 4 {
            return Err(Error::Config(format!(
                "extract_patches expects [b,c,h,w], got {:?}",
                tx.shape()
            )));
        }
        let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "image {h}×{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let n_patch = gh * gw;
        let patch_len = c * p * p;
        let src = tx.data();
        let mut data = vec![0.0; b * n_patch * patch_len];
        walk_patches(b, c, h, w, p, |dsti, srci| data[dsti] = src[srci]);
        let numel = tx.numel();
        let requires = self.requires(x);
        Ok(self.push_op(
            Tensor::new(vec![b, n_patch, patch_len], data)?,
            requires,
            Box::new(move |g, sink| {
                if sink.wants(x) {
                    sink.accumulate_with(x, numel, |dx| {
                        walk_patches(b, c, h, w, p, |dsti, srci| dx[srci] += g[dsti]);
                    });
                }
            }),
        ))
    }
}

/// Visit `(patch_major_index, image_index)` pairs of the patch layout:
/// row-major grid order, channel-major within a patch, rows contiguous.
fn walk_patches(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mut visit: impl FnMut(usize, usize),
) {
    let (gh, gw) = (h / p, w / p);
    let n_patch = gh * gw;
    let patch_len = c * p * p;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let patch_base = (bi * n_patch + gy * gw + gx) * patch_len;
                for ci in 0..c {
                    for py in 0..p {
                        let src_row = ((bi * c + ci) * h + gy * p + py) * w + gx * p;
                        let dst_row = patch_base + (ci * p + py) * p;
                        for px in 0..p {
                            visit(dst_row + px, src_row + px);
                        }
                    }
                }
            }
        }
    }
}
