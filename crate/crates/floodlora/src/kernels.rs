//! Compute kernels behind the tape ops.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! a rayon variant parallelizes over disjoint output regions. Each output
//! element is always produced by the same sequential inner loop, so the
//! parallel and sequential paths are bitwise identical and results do not
//! depend on thread scheduling. Dispatch wrappers pick the parallel path
//! only when the estimated work is large enough to amortize fork overhead.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum estimated multiply-accumulate count before forking pays off.
pub const PAR_MIN_WORK: usize = 1 << 15;

/// Convolution geometry shared by the conv/deconv kernel family.
///
/// `kernel` layout is `[out_c, in_c, kh, kw]` for forward convolution and
/// `[in_c, out_c, kh, kw]` for transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.batch * self.in_c * self.in_h * self.in_w
    }
    pub fn out_len(&self) -> usize {
        self.batch * self.out_c * self.out_h * self.out_w
    }
    pub fn kernel_len(&self) -> usize {
        self.in_c * self.out_c * self.kh * self.kw
    }
    fn work(&self) -> usize {
        self.out_len() * self.in_c * self.kh * self.kw
    }
}

// ── matmul family ────────────────────────────────────────────────────

/// `a[m,k] · b[k,n] -> out[m,n]`, one output row per task.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MIN_WORK {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, row, k, n);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, row, k, n);
    });
    out
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], out_row: &mut [f64], k: usize, n: usize) {
    // ikj order keeps the inner loop contiguous over b and out.
    for (p, &a_ip) in a_row.iter().enumerate().take(k) {
        if a_ip == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o += a_ip * bv;
        }
    }
}

/// `a[m,n] · b[k,n]ᵀ -> out[m,k]` (second operand transposed).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MIN_WORK {
        return matmul_nt_par(a, b, m, n, k);
    }
    matmul_nt_seq(a, b, m, n, k)
}

pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for (i, row) in out.chunks_mut(k).enumerate() {
        matmul_nt_row(&a[i * n..(i + 1) * n], b, row, n);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        matmul_nt_row(&a[i * n..(i + 1) * n], b, row, n);
    });
    out
}

#[inline]
fn matmul_nt_row(a_row: &[f64], b: &[f64], out_row: &mut [f64], n: usize) {
    for (p, o) in out_row.iter_mut().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        let mut s = 0.0;
        for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
            s += av * bv;
        }
        *o += s;
    }
}

/// `a[m,k]ᵀ · b[m,n] -> out[k,n]` (first operand transposed).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if k > 1 && m * k * n >= PAR_MIN_WORK {
        return matmul_tn_par(a, b, m, k, n);
    }
    matmul_tn_seq(a, b, m, k, n)
}

pub fn matmul_tn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for (p, row) in out.chunks_mut(n).enumerate() {
        matmul_tn_row(a, b, row, p, m, k, n);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        matmul_tn_row(a, b, row, p, m, k, n);
    });
    out
}

#[inline]
fn matmul_tn_row(a: &[f64], b: &[f64], out_row: &mut [f64], p: usize, m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_ip = a[i * k + p];
        if a_ip == 0.0 {
            continue;
        }
        let b_row = &b[i * n..(i + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o += a_ip * bv;
        }
    }
}

// ── convolution family ───────────────────────────────────────────────
//
// Cross-correlation semantics throughout (no kernel flip). All six kernels
// are written in gather form: each output element owns its accumulation.

/// Forward convolution. `x[b,ic,h,w]`, `k[oc,ic,kh,kw]` → `[b,oc,oh,ow]`.
pub fn conv2d_fwd(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if g.work() >= PAR_MIN_WORK && g.batch * g.out_c > 1 {
        let mut out = vec![0.0; g.out_len()];
        let plane = g.out_h * g.out_w;
        out.par_chunks_mut(plane).enumerate().for_each(|(bc, p)| {
            conv2d_fwd_plane(x, kernel, g, bc / g.out_c, bc % g.out_c, p);
        });
        return out;
    }
    conv2d_fwd_seq(x, kernel, g)
}

pub fn conv2d_fwd_seq(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let plane = g.out_h * g.out_w;
    for (bc, p) in out.chunks_mut(plane).enumerate() {
        conv2d_fwd_plane(x, kernel, g, bc / g.out_c, bc % g.out_c, p);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn conv2d_fwd_par(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let plane = g.out_h * g.out_w;
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, p)| {
        conv2d_fwd_plane(x, kernel, g, bc / g.out_c, bc % g.out_c, p);
    });
    out
}

/// For coordinates `o` in `[0, limit_out)` with `o·stride + k − pad` a valid
/// index into `[0, limit_in)`, return the half-open `(lo, hi)` range of `o`.
#[inline]
fn coord_range(limit_in: usize, limit_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let off = k as i64 - pad as i64;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_num = limit_in as i64 - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(limit_out);
    (lo.min(hi), hi)
}

/// Offset of `o·stride + k − pad` at `o = lo` (guaranteed non-negative).
#[inline]
fn base_index(lo: usize, k: usize, stride: usize, pad: usize) -> usize {
    (lo as i64 * stride as i64 + k as i64 - pad as i64) as usize
}

fn conv2d_fwd_plane(x: &[f64], kernel: &[f64], g: &ConvGeom, b: usize, oc: usize, plane: &mut [f64]) {
    let x_batch = &x[b * g.in_c * g.in_h * g.in_w..];
    for ic in 0..g.in_c {
        let x_chan = &x_batch[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        let k_block = &kernel[(oc * g.in_c + ic) * g.kh * g.kw..];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = coord_range(g.in_h, g.out_h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let w = k_block[ky * g.kw + kx];
                if w == 0.0 {
                    continue;
                }
                let (ox_lo, ox_hi) = coord_range(g.in_w, g.out_w, kx, g.stride, g.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let mut iy = base_index(oy_lo, ky, g.stride, g.pad);
                for oy in oy_lo..oy_hi {
                    let x_row = &x_chan[iy * g.in_w..(iy + 1) * g.in_w];
                    let out_row = &mut plane[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                    let mut ix = base_index(ox_lo, kx, g.stride, g.pad);
                    if g.stride == 1 {
                        for (o, xv) in out_row.iter_mut().zip(&x_row[ix..ix + ox_hi - ox_lo]) {
                            *o += w * xv;
                        }
                    } else {
                        for o in out_row.iter_mut() {
                            *o += w * x_row[ix];
                            ix += g.stride;
                        }
                    }
                    iy += g.stride;
                }
            }
        }
    }
}

/// Gradient of forward convolution w.r.t. its input.
pub fn conv2d_dx(gout: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.in_len()];
    let plane = g.in_h * g.in_w;
    let run = |(bc, p): (usize, &mut [f64])| {
        conv2d_dx_plane(gout, kernel, g, bc / g.in_c, bc % g.in_c, p);
    };
    #[cfg(feature = "parallel")]
    if g.work() >= PAR_MIN_WORK && g.batch * g.in_c > 1 {
        dx.par_chunks_mut(plane).enumerate().for_each(run);
        return dx;
    }
    dx.chunks_mut(plane).enumerate().for_each(run);
    dx
}

fn conv2d_dx_plane(gout: &[f64], kernel: &[f64], g: &ConvGeom, b: usize, ic: usize, plane: &mut [f64]) {
    let g_batch = &gout[b * g.out_c * g.out_h * g.out_w..];
    for oc in 0..g.out_c {
        let g_chan = &g_batch[oc * g.out_h * g.out_w..(oc + 1) * g.out_h * g.out_w];
        let k_block = &kernel[(oc * g.in_c + ic) * g.kh * g.kw..];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = coord_range(g.in_h, g.out_h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let w = k_block[ky * g.kw + kx];
                if w == 0.0 {
                    continue;
                }
                let (ox_lo, ox_hi) = coord_range(g.in_w, g.out_w, kx, g.stride, g.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let mut iy = base_index(oy_lo, ky, g.stride, g.pad);
                for oy in oy_lo..oy_hi {
                    let g_row = &g_chan[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                    let dx_row = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let mut ix = base_index(ox_lo, kx, g.stride, g.pad);
                    if g.stride == 1 {
                        for (gv, d) in g_row.iter().zip(&mut dx_row[ix..ix + ox_hi - ox_lo]) {
                            *d += w * gv;
                        }
                    } else {
                        for gv in g_row {
                            dx_row[ix] += w * gv;
                            ix += g.stride;
                        }
                    }
                    iy += g.stride;
                }
            }
        }
    }
}

/// Gradient of forward convolution w.r.t. the kernel.
pub fn conv2d_dk(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.out_c * g.in_c * g.kh * g.kw];
    let block = g.kh * g.kw;
    let run = |(oi, p): (usize, &mut [f64])| {
        conv2d_dk_block(x, gout, g, oi / g.in_c, oi % g.in_c, p);
    };
    #[cfg(feature = "parallel")]
    if g.work() >= PAR_MIN_WORK && g.out_c * g.in_c > 1 {
        dk.par_chunks_mut(block).enumerate().for_each(run);
        return dk;
    }
    dk.chunks_mut(block).enumerate().for_each(run);
    dk
}

fn conv2d_dk_block(x: &[f64], gout: &[f64], g: &ConvGeom, oc: usize, ic: usize, block: &mut [f64]) {
    for ky in 0..g.kh {
        let (oy_lo, oy_hi) = coord_range(g.in_h, g.out_h, ky, g.stride, g.pad);
        for kx in 0..g.kw {
            let (ox_lo, ox_hi) = coord_range(g.in_w, g.out_w, kx, g.stride, g.pad);
            let mut s = 0.0;
            for b in 0..g.batch {
                let x_chan = &x[(b * g.in_c + ic) * g.in_h * g.in_w..];
                let g_chan = &gout[(b * g.out_c + oc) * g.out_h * g.out_w..];
                let mut iy = base_index(oy_lo, ky, g.stride, g.pad);
                for oy in oy_lo..oy_hi {
                    let g_row = &g_chan[oy * g.out_w + ox_lo..oy * g.out_w + ox_hi];
                    let x_row = &x_chan[iy * g.in_w..(iy + 1) * g.in_w];
                    let mut ix = base_index(ox_lo, kx, g.stride, g.pad);
                    if g.stride == 1 {
                        for (gv, xv) in g_row.iter().zip(&x_row[ix..ix + ox_hi - ox_lo]) {
                            s += gv * xv;
                        }
                    } else {
                        for gv in g_row {
                            s += gv * x_row[ix];
                            ix += g.stride;
                        }
                    }
                    iy += g.stride;
                }
            }
            block[ky * g.kw + kx] = s;
        }
    }
}

// Transposed convolution. Geometry fields keep their forward-conv meaning
// relative to the *underlying* convolution: a deconv taking `[b,ic,h,w]` to
// `[b,oc,oh,ow]` with `oh = (h-1)*stride + kh - 2*pad` is the adjoint of a
// conv taking `[b,oc,oh,ow]` to `[b,ic,h,w]`. Kernel layout `[ic,oc,kh,kw]`.

/// Forward transposed convolution (gather form, no scatter races).
pub fn deconv2d_fwd(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.out_len()];
    let plane = g.out_h * g.out_w;
    let run = |(bc, p): (usize, &mut [f64])| {
        deconv2d_fwd_plane(x, kernel, g, bc / g.out_c, bc % g.out_c, p);
    };
    #[cfg(feature = "parallel")]
    if g.work() >= PAR_MIN_WORK && g.batch * g.out_c > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(run);
        return out;
    }
    out.chunks_mut(plane).enumerate().for_each(run);
    out
}

fn deconv2d_fwd_plane(x: &[f64], kernel: &[f64], g: &ConvGeom, b: usize, oc: usize, plane: &mut [f64]) {
    let x_batch = &x[b * g.in_c * g.in_h * g.in_w..];
    for ic in 0..g.in_c {
        let x_chan = &x_batch[ic * g.in_h * g.in_w..(ic + 1) * g.in_h * g.in_w];
        let k_block = &kernel[(ic * g.out_c + oc) * g.kh * g.kw..];
        for ky in 0..g.kh {
            // Input rows whose scatter target oy = iy·s + ky − pad is valid.
            let (iy_lo, iy_hi) = coord_range(g.out_h, g.in_h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let w = k_block[ky * g.kw + kx];
                if w == 0.0 {
                    continue;
                }
                let (ix_lo, ix_hi) = coord_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                if ix_lo >= ix_hi {
                    continue;
                }
                let mut oy = base_index(iy_lo, ky, g.stride, g.pad);
                for iy in iy_lo..iy_hi {
                    let x_row = &x_chan[iy * g.in_w + ix_lo..iy * g.in_w + ix_hi];
                    let out_row = &mut plane[oy * g.out_w..(oy + 1) * g.out_w];
                    let mut ox = base_index(ix_lo, kx, g.stride, g.pad);
                    for xv in x_row {
                        out_row[ox] += w * xv;
                        ox += g.stride;
                    }
                    oy += g.stride;
                }
            }
        }
    }
}

/// Gradient of transposed convolution w.r.t. its input (a plain conv pass).
pub fn deconv2d_dx(gout: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.in_len()];
    let plane = g.in_h * g.in_w;
    let run = |(bc, p): (usize, &mut [f64])| {
        deconv2d_dx_plane(gout, kernel, g, bc / g.in_c, bc % g.in_c, p);
    };
    #[cfg(feature = "parallel")]
    if g.work() >= PAR_MIN_WORK && g.batch * g.in_c > 1 {
        dx.par_chunks_mut(plane).enumerate().for_each(run);
        return dx;
    }
    dx.chunks_mut(plane).enumerate().for_each(run);
    dx
}

fn deconv2d_dx_plane(gout: &[f64], kernel: &[f64], g: &ConvGeom, b: usize, ic: usize, plane: &mut [f64]) {
    let g_batch = &gout[b * g.out_c * g.out_h * g.out_w..];
    for oc in 0..g.out_c {
        let g_chan = &g_batch[oc * g.out_h * g.out_w..(oc + 1) * g.out_h * g.out_w];
        let k_block = &kernel[(ic * g.out_c + oc) * g.kh * g.kw..];
        for ky in 0..g.kh {
            let (iy_lo, iy_hi) = coord_range(g.out_h, g.in_h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let w = k_block[ky * g.kw + kx];
                if w == 0.0 {
                    continue;
                }
                let (ix_lo, ix_hi) = coord_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                if ix_lo >= ix_hi {
                    continue;
                }
                let mut oy = base_index(iy_lo, ky, g.stride, g.pad);
                for iy in iy_lo..iy_hi {
                    let g_row = &g_chan[oy * g.out_w..(oy + 1) * g.out_w];
                    let dx_row = &mut plane[iy * g.in_w + ix_lo..iy * g.in_w + ix_hi];
                    let mut ox = base_index(ix_lo, kx, g.stride, g.pad);
                    for d in dx_row.iter_mut() {
                        *d += w * g_row[ox];
                        ox += g.stride;
                    }
                    oy += g.stride;
                }
            }
        }
    }
}

/// Gradient of transposed convolution w.r.t. the kernel.
pub fn deconv2d_dk(x: &[f64], gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.kernel_len()];
    let block = g.kh * g.kw;
    let run = |(oi, p): (usize, &mut [f64])| {
        deconv2d_dk_block(x, gout, g, oi / g.out_c, oi % g.out_c, p);
    };
    #[cfg(feature = "parallel")]
    if g.work() >= PAR_MIN_WORK && g.in_c * g.out_c > 1 {
        dk.par_chunks_mut(block).enumerate().for_each(run);
        return dk;
    }
    dk.chunks_mut(block).enumerate().for_each(run);
    dk
}

fn deconv2d_dk_block(x: &[f64], gout: &[f64], g: &ConvGeom, ic: usize, oc: usize, block: &mut [f64]) {
    for ky in 0..g.kh {
        let (iy_lo, iy_hi) = coord_range(g.out_h, g.in_h, ky, g.stride, g.pad);
        for kx in 0..g.kw {
            let (ix_lo, ix_hi) = coord_range(g.out_w, g.in_w, kx, g.stride, g.pad);
            let mut s = 0.0;
            for b in 0..g.batch {
                let x_chan = &x[(b * g.in_c + ic) * g.in_h * g.in_w..];
                let g_chan = &gout[(b * g.out_c + oc) * g.out_h * g.out_w..];
                let mut oy = base_index(iy_lo, ky, g.stride, g.pad);
                for iy in iy_lo..iy_hi {
                    let x_row = &x_chan[iy * g.in_w + ix_lo..iy * g.in_w + ix_hi];
                    let g_row = &g_chan[oy * g.out_w..(oy + 1) * g.out_w];
                    let mut ox = base_index(ix_lo, kx, g.stride, g.pad);
                    for xv in x_row {
                        s += xv * g_row[ox];
                        ox += g.stride;
                    }
                    oy += g.stride;
                }
            }
            block[ky * g.kw + kx] = s;
        }
    }
}

// ── softmax rows ─────────────────────────────────────────────────────

/// Row-wise softmax with max-subtraction; `data` is `rows × cols`.
pub fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    #[cfg(feature = "parallel")]
    if rows > 1 && rows * cols >= PAR_MIN_WORK {
        out.par_chunks_mut(cols).for_each(softmax_row);
        return out;
    }
    out.chunks_mut(cols).for_each(softmax_row);
    out
}

#[inline]
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
