//! Forward and backward kernels over flat NHWC buffers.
//!
//! These are shared by the autograd tape and by frozen, gradient-free
//! networks such as the DEM encoder.

use crate::gemm::{gemm, Mat, MatMut};
use crate::Real;

/// Geometry of a stride-1 "same" convolution over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Unfold `k × k` patches (zero padded) into a `[n·h·w, k·k·cin]` matrix.
pub fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let pad = (g.k / 2) as isize;
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.n {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = (b * g.h + y) * g.w + xx;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                        let off = (ky * g.k + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch gradients back onto the input grid (adjoint of [`im2col`]).
pub fn col2im<T: Real>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let pad = (g.k / 2) as isize;
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = (b * g.h + y) * g.w + xx;
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                        let off = (ky * g.k + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns `(output, unfolded input)`. Weights are `[k, k, cin, cout]`.
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = if g.k == 1 { x.to_vec() } else { im2col(x, g) };
    let rows = g.rows();
    let mut out = vec![T::zero(); rows * g.cout];
    gemm(
        T::one(),
        Mat::new(&cols, rows, g.patch()),
        Mat::new(weight, g.patch(), g.cout),
        T::zero(),
        MatMut::new(&mut out, rows, g.cout),
    );
    if let Some(b) = bias {
        add_row_bias(&mut out, b);
    }
    (out, cols)
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Real>(dy: &[T], cols: &[T], weight: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.rows();
    let patch = g.patch();
    let mut dw = vec![T::zero(); patch * g.cout];
    gemm(
        T::one(),
        Mat::new(cols, rows, patch).t(),
        Mat::new(dy, rows, g.cout),
        T::zero(),
        MatMut::new(&mut dw, patch, g.cout),
    );
    let db = column_sums(dy, g.cout);
    let mut dcols = vec![T::zero(); rows * patch];
    gemm(
        T::one(),
        Mat::new(dy, rows, g.cout),
        Mat::new(weight, patch, g.cout).t(),
        T::zero(),
        MatMut::new(&mut dcols, rows, patch),
    );
    let dx = if g.k == 1 { dcols } else { col2im(&dcols, g) };
    (dx, dw, db)
}

pub fn add_row_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn column_sums<T: Real>(m: &[T], cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

/// 2×2 average pooling, stride 2. `h` and `w` must be even.
pub fn avg_pool2<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let o = ((b * ho + y) * wo + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += x[i + ch];
                    }
                }
                for ch in 0..c {
                    out[o + ch] *= quarter;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let i = ((b * h + y) * w + xx) * c;
                let o = ((b * ho + y / 2) * wo + xx / 2) * c;
                for ch in 0..c {
                    dx[i + ch] = dy[o + ch] * quarter;
                }
            }
        }
    }
    dx
}

/// 2×2 max pooling, stride 2 (forward only).
pub fn max_pool2<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::neg_infinity(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let o = ((b * ho + y) * wo + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[o + ch] = out[o + ch].max(x[i + ch]);
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling. `h`, `w` are input sizes.
pub fn upsample2<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let o = ((b * ho + y) * wo + xx) * c;
                let i = ((b * h + y / 2) * w + xx / 2) * c;
                out[o..o + c].copy_from_slice(&x[i..i + c]);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let o = ((b * ho + y) * wo + xx) * c;
                let i = ((b * h + y / 2) * w + xx / 2) * c;
                for ch in 0..c {
                    dx[i + ch] += dy[o + ch];
                }
            }
        }
    }
    dx
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization over `[n, s, c]` (s = flattened spatial extent).
/// Returns `(y, mean, rstd)` with statistics per `(batch, group)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    s: usize,
    c: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let count = T::lit((s * cg) as f64);
    let eps = T::lit(GROUP_NORM_EPS);
    let mut mean = vec![T::zero(); n * groups];
    let mut rstd = vec![T::zero(); n * groups];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * s * c;
        for gi in 0..groups {
            let mut sum = T::zero();
            for p in 0..s {
                let o = base + p * c + gi * cg;
                for &v in &x[o..o + cg] {
                    sum += v;
                }
            }
            let mu = sum / count;
            let mut var = T::zero();
            for p in 0..s {
                let o = base + p * c + gi * cg;
                for &v in &x[o..o + cg] {
                    let d = v - mu;
                    var += d * d;
                }
            }
            let r = T::one() / (var / count + eps).sqrt();
            mean[b * groups + gi] = mu;
            rstd[b * groups + gi] = r;
            for p in 0..s {
                let o = base + p * c + gi * cg;
                for j in 0..cg {
                    let ch = gi * cg + j;
                    y[o + j] = (x[o + j] - mu) * r * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, mean, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    n: usize,
    s: usize,
    c: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let count = T::lit((s * cg) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        let base = b * s * c;
        for gi in 0..groups {
            let mu = mean[b * groups + gi];
            let r = rstd[b * groups + gi];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for p in 0..s {
                let o = base + p * c + gi * cg;
                for j in 0..cg {
                    let ch = gi * cg + j;
                    let xhat = (x[o + j] - mu) * r;
                    let g = dy[o + j];
                    dgamma[ch] += g * xhat;
                    dbeta[ch] += g;
                    let dxhat = g * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for p in 0..s {
                let o = base + p * c + gi * cg;
                for j in 0..cg {
                    let ch = gi * cg + j;
                    let xhat = (x[o + j] - mu) * r;
                    let dxhat = dy[o + j] * gamma[ch];
                    dx[o + j] = r / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Shapes for multi-head scaled dot-product attention.
/// Queries are `[b, tq, c]`, keys and values `[b, tk, c]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub b: usize,
    pub tq: usize,
    pub tk: usize,
    pub c: usize,
    pub heads: usize,
    /// Number of valid keys per batch element; keys past it are masked out.
    pub key_lens: Option<Vec<usize>>,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    fn valid_keys(&self, b: usize) -> usize {
        self.key_lens.as_ref().map_or(self.tk, |l| l[b].min(self.tk))
    }
}

/// Returns `(output [b, tq, c], probabilities [b, heads, tq, tk])`.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); g.b * g.heads * g.tq * g.tk];
    let mut out = vec![T::zero(); g.b * g.tq * g.c];
    for b in 0..g.b {
        let valid = g.valid_keys(b);
        for h in 0..g.heads {
            let qo = b * g.tq * g.c + h * dh;
            let ko = b * g.tk * g.c + h * dh;
            let po = (b * g.heads + h) * g.tq * g.tk;
            let p = &mut probs[po..po + g.tq * g.tk];
            if valid > 0 {
                gemm(
                    scale,
                    Mat::strided(&q[qo..], g.tq, dh, g.c, 1),
                    Mat::strided(&k[ko..], valid, dh, g.c, 1).t(),
                    T::zero(),
                    MatMut::strided(p, g.tq, valid, g.tk, 1),
                );
            }
            for row in p.chunks_exact_mut(g.tk) {
                softmax_prefix(row, valid);
            }
            if valid > 0 {
                gemm(
                    T::one(),
                    Mat::strided(p, g.tq, valid, g.tk, 1),
                    Mat::strided(&v[ko..], valid, dh, g.c, 1),
                    T::zero(),
                    MatMut::strided(&mut out[qo..], g.tq, dh, g.c, 1),
                );
            }
        }
    }
    (out, probs)
}

fn softmax_prefix<T: Real>(row: &mut [T], valid: usize) {
    let (live, masked) = row.split_at_mut(valid);
    masked.iter_mut().for_each(|v| *v = T::zero());
    if live.is_empty() {
        return;
    }
    let m = live.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for v in live.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in live.iter_mut() {
        *v /= z;
    }
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Real>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); g.tq * g.tk];
    for b in 0..g.b {
        let valid = g.valid_keys(b);
        if valid == 0 {
            continue;
        }
        for h in 0..g.heads {
            let qo = b * g.tq * g.c + h * dh;
            let ko = b * g.tk * g.c + h * dh;
            let po = (b * g.heads + h) * g.tq * g.tk;
            let p = &probs[po..po + g.tq * g.tk];
            let p_mat = Mat::strided(p, g.tq, valid, g.tk, 1);
            let do_mat = Mat::strided(&dout[qo..], g.tq, dh, g.c, 1);
            // dV = Pᵀ dO
            gemm(T::one(), p_mat.t(), do_mat, T::zero(), MatMut::strided(&mut dv[ko..], valid, dh, g.c, 1));
            // dP = dO Vᵀ
            gemm(
                T::one(),
                do_mat,
                Mat::strided(&v[ko..], valid, dh, g.c, 1).t(),
                T::zero(),
                MatMut::strided(&mut dp, g.tq, valid, g.tk, 1),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for r in 0..g.tq {
                let prow = &p[r * g.tk..r * g.tk + valid];
                let drow = &mut dp[r * g.tk..r * g.tk + valid];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            let ds = Mat::strided(&dp, g.tq, valid, g.tk, 1);
            gemm(
                scale,
                ds,
                Mat::strided(&k[ko..], valid, dh, g.c, 1),
                T::zero(),
                MatMut::strided(&mut dq[qo..], g.tq, dh, g.c, 1),
            );
            gemm(
                scale,
                ds.t(),
                Mat::strided(&q[qo..], g.tq, dh, g.c, 1),
                T::zero(),
                MatMut::strided(&mut dk[ko..], valid, dh, g.c, 1),
            );
        }
    }
    (dq, dk, dv)
}
