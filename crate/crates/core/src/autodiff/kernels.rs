//! Forward and backward kernels for the tape primitives.
//!
//! Feature maps are channels-last `[T, H, W, C]`. Every parallel loop writes
//! disjoint outputs and reduces in a fixed order, so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;

/// Extents of a channels-last video feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Geom {
    pub fn new(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.tokens() * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.t, self.h, self.w, self.c]
    }
}

/// Kernel extents `(kt, kh, kw)`, odd, zero "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Kernel3 {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Kernel3 {
    pub const CUBE3: Kernel3 = Kernel3 { kt: 3, kh: 3, kw: 3 };
    pub const POINT: Kernel3 = Kernel3 { kt: 1, kh: 1, kw: 1 };

    pub fn taps(&self) -> usize {
        self.kt * self.kh * self.kw
    }

    /// `(dt, dh, dw)` offset of tap index `k`.
    #[inline]
    fn offset(&self, k: usize) -> (isize, isize, isize) {
        let dw = (k % self.kw) as isize - (self.kw / 2) as isize;
        let dh = ((k / self.kw) % self.kh) as isize - (self.kh / 2) as isize;
        let dt = (k / (self.kw * self.kh)) as isize - (self.kt / 2) as isize;
        (dt, dh, dw)
    }
}

#[inline]
fn shifted(g: &Geom, t: usize, h: usize, w: usize, d: (isize, isize, isize)) -> Option<usize> {
    let tt = t as isize + d.0;
    let hh = h as isize + d.1;
    let ww = w as isize + d.2;
    if tt < 0 || hh < 0 || ww < 0 || tt >= g.t as isize || hh >= g.h as isize || ww >= g.w as isize {
        None
    } else {
        Some(((tt as usize * g.h + hh as usize) * g.w) + ww as usize)
    }
}

// ---------------------------------------------------------------- linear

/// Rows handled per parallel task in the dense kernels.
const ROW_BLOCK: usize = 64;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out[r, o] = Σ_i w[o, i]·x[r, i] + b[o]`, `w` is `cout × cin`.
pub fn linear_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, cin: usize, cout: usize) -> Vec<f64> {
    let rows = x.len() / cin;
    let mut out = vec![0.0; rows * cout];
    out.par_chunks_mut(cout * ROW_BLOCK)
        .zip(x.par_chunks(cin * ROW_BLOCK))
        .for_each(|(o_blk, x_blk)| {
            for (o_row, x_row) in o_blk.chunks_mut(cout).zip(x_blk.chunks(cin)) {
                for (o, (ov, wr)) in o_row.iter_mut().zip(w.chunks(cin)).enumerate() {
                    *ov = b.map_or(0.0, |b| b[o]) + dot(wr, x_row);
                }
            }
        });
    out
}

pub fn linear_backward_input(g: &[f64], w: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let rows = g.len() / cout;
    let mut dx = vec![0.0; rows * cin];
    dx.par_chunks_mut(cin * ROW_BLOCK)
        .zip(g.par_chunks(cout * ROW_BLOCK))
        .for_each(|(dx_blk, g_blk)| {
            for (dx_row, g_row) in dx_blk.chunks_mut(cin).zip(g_blk.chunks(cout)) {
                for (&gv, wr) in g_row.iter().zip(w.chunks(cin)) {
                    if gv != 0.0 {
                        axpy(dx_row, gv, wr);
                    }
                }
            }
        });
    dx
}

pub fn linear_backward_weight(g: &[f64], x: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut dw = vec![0.0; cout * cin];
    dw.par_chunks_mut(cin).enumerate().for_each(|(o, dw_row)| {
        for (g_row, xr) in g.chunks(cout).zip(x.chunks(cin)) {
            let gv = g_row[o];
            if gv != 0.0 {
                axpy(dw_row, gv, xr);
            }
        }
    });
    dw
}

pub fn sum_rows(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

// ---------------------------------------------------------------- activations

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

// ---------------------------------------------------------------- layer norm

pub const LN_EPS: f64 = 1e-5;

/// Per-row normalization; returns `(out, mean, rstd)`.
pub fn layer_norm_forward(x: &[f64], g: &[f64], b: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / dim;
    let mut out = vec![0.0; x.len()];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    out.par_chunks_mut(dim)
        .zip(x.par_chunks(dim))
        .zip(mean.par_iter_mut().zip(rstd.par_iter_mut()))
        .for_each(|((o, xr), (m, r))| {
            let mu = xr.iter().sum::<f64>() / dim as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..dim {
                o[i] = (xr[i] - mu) * rs * g[i] + b[i];
            }
            *m = mu;
            *r = rs;
        });
    (out, mean, rstd)
}

/// Returns `(dx, dg, db)`.
pub fn layer_norm_backward(
    gout: &[f64],
    x: &[f64],
    g: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(dim).enumerate().for_each(|(r, dxr)| {
        let xr = &x[r * dim..(r + 1) * dim];
        let gr = &gout[r * dim..(r + 1) * dim];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..dim {
            let xhat = (xr[i] - mu) * rs;
            let dxhat = gr[i] * g[i];
            s1 += dxhat;
            s2 += dxhat * xhat;
        }
        s1 /= dim as f64;
        s2 /= dim as f64;
        for i in 0..dim {
            let xhat = (xr[i] - mu) * rs;
            dxr[i] = rs * (gr[i] * g[i] - s1 - xhat * s2);
        }
    });
    let mut dg = vec![0.0; dim];
    let mut db = vec![0.0; dim];
    for (r, gr) in gout.chunks(dim).enumerate() {
        let xr = &x[r * dim..(r + 1) * dim];
        for i in 0..dim {
            dg[i] += gr[i] * (xr[i] - mean[r]) * rstd[r];
            db[i] += gr[i];
        }
    }
    (dx, dg, db)
}

// ---------------------------------------------------------------- causal 1-D depthwise conv

/// `out[l, c] = b[c] + Σ_j w[j, c]·x[l − (K−1) + j, c]`, zero left padding.
pub fn causal_conv1d_forward(x: &[f64], w: &[f64], b: &[f64], ch: usize, k: usize) -> Vec<f64> {
    let len = x.len() / ch;
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(ch).enumerate().for_each(|(l, o)| {
        o.copy_from_slice(b);
        for j in 0..k {
            let src = l as isize - (k - 1) as isize + j as isize;
            if src < 0 || src as usize >= len {
                continue;
            }
            let xr = &x[src as usize * ch..(src as usize + 1) * ch];
            let wr = &w[j * ch..(j + 1) * ch];
            for c in 0..ch {
                o[c] += wr[c] * xr[c];
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`.
pub fn causal_conv1d_backward(g: &[f64], x: &[f64], w: &[f64], ch: usize, k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let len = x.len() / ch;
    let mut dx = vec![0.0; x.len()];
    // x[s] feeds out[s + (K−1) − j]
    dx.par_chunks_mut(ch).enumerate().for_each(|(s, d)| {
        for j in 0..k {
            let l = s + (k - 1) - j;
            if l >= len {
                continue;
            }
            let gr = &g[l * ch..(l + 1) * ch];
            let wr = &w[j * ch..(j + 1) * ch];
            for c in 0..ch {
                d[c] += wr[c] * gr[c];
            }
        }
    });
    let mut dw = vec![0.0; k * ch];
    dw.par_chunks_mut(ch).enumerate().for_each(|(j, d)| {
        for l in 0..len {
            let src = l as isize - (k - 1) as isize + j as isize;
            if src < 0 {
                continue;
            }
            let xr = &x[src as usize * ch..(src as usize + 1) * ch];
            let gr = &g[l * ch..(l + 1) * ch];
            for c in 0..ch {
                d[c] += gr[c] * xr[c];
            }
        }
    });
    (dx, dw, sum_rows(g, ch))
}

// ---------------------------------------------------------------- 3-D convolutions

/// Full convolution, weight `[kt, kh, kw, cin, cout]`.
pub fn conv3d_forward(x: &[f64], gi: Geom, w: &[f64], b: Option<&[f64]>, cout: usize, k: Kernel3) -> Vec<f64> {
    let cin = gi.c;
    let mut out = vec![0.0; gi.tokens() * cout];
    let offsets: Vec<_> = (0..k.taps()).map(|i| k.offset(i)).collect();
    out.par_chunks_mut(gi.w * cout).enumerate().for_each(|(row, o_row)| {
        let (t, h) = (row / gi.h, row % gi.h);
        for wi in 0..gi.w {
            let o = &mut o_row[wi * cout..(wi + 1) * cout];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for (tap, &d) in offsets.iter().enumerate() {
                let Some(src) = shifted(&gi, t, h, wi, d) else { continue };
                let xr = &x[src * cin..(src + 1) * cin];
                let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
                for ci in 0..cin {
                    let xv = xr[ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let wr = &wt[ci * cout..(ci + 1) * cout];
                    for co in 0..cout {
                        o[co] += xv * wr[co];
                    }
                }
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv3d_backward(
    g: &[f64],
    x: &[f64],
    gi: Geom,
    w: &[f64],
    cout: usize,
    k: Kernel3,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cin = gi.c;
    let offsets: Vec<_> = (0..k.taps()).map(|i| k.offset(i)).collect();
    let mut dx = vec![0.0; x.len()];
    // input p receives from output p − d through tap d
    dx.par_chunks_mut(gi.w * cin).enumerate().for_each(|(row, d_row)| {
        let (t, h) = (row / gi.h, row % gi.h);
        for wi in 0..gi.w {
            let d = &mut d_row[wi * cin..(wi + 1) * cin];
            for (tap, &(dt, dh, dw)) in offsets.iter().enumerate() {
                let Some(dst) = shifted(&gi, t, h, wi, (-dt, -dh, -dw)) else { continue };
                let gr = &g[dst * cout..(dst + 1) * cout];
                let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
                for ci in 0..cin {
                    let wr = &wt[ci * cout..(ci + 1) * cout];
                    let mut acc = 0.0;
                    for co in 0..cout {
                        acc += wr[co] * gr[co];
                    }
                    d[ci] += acc;
                }
            }
        }
    });
    let mut dw = vec![0.0; k.taps() * cin * cout];
    dw.par_chunks_mut(cin * cout).enumerate().for_each(|(tap, dwt)| {
        let d = offsets[tap];
        for t in 0..gi.t {
            for h in 0..gi.h {
                for wi in 0..gi.w {
                    let Some(src) = shifted(&gi, t, h, wi, d) else { continue };
                    let q = (t * gi.h + h) * gi.w + wi;
                    let gr = &g[q * cout..(q + 1) * cout];
                    let xr = &x[src * cin..(src + 1) * cin];
                    for ci in 0..cin {
                        let xv = xr[ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let row = &mut dwt[ci * cout..(ci + 1) * cout];
                        for co in 0..cout {
                            row[co] += xv * gr[co];
                        }
                    }
                }
            }
        }
    });
    (dx, dw, sum_rows(g, cout))
}

/// Per-channel convolution, weight `[kt, kh, kw, c]`.
pub fn dwconv3d_forward(x: &[f64], gi: Geom, w: &[f64], b: Option<&[f64]>, k: Kernel3) -> Vec<f64> {
    let c = gi.c;
    let offsets: Vec<_> = (0..k.taps()).map(|i| k.offset(i)).collect();
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(gi.w * c).enumerate().for_each(|(row, o_row)| {
        let (t, h) = (row / gi.h, row % gi.h);
        for wi in 0..gi.w {
            let o = &mut o_row[wi * c..(wi + 1) * c];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for (tap, &d) in offsets.iter().enumerate() {
                let Some(src) = shifted(&gi, t, h, wi, d) else { continue };
                let xr = &x[src * c..(src + 1) * c];
                let wr = &w[tap * c..(tap + 1) * c];
                for ci in 0..c {
                    o[ci] += xr[ci] * wr[ci];
                }
            }
        }
    });
    out
}

pub fn dwconv3d_backward(g: &[f64], x: &[f64], gi: Geom, w: &[f64], k: Kernel3) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gi.c;
    let offsets: Vec<_> = (0..k.taps()).map(|i| k.offset(i)).collect();
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(gi.w * c).enumerate().for_each(|(row, d_row)| {
        let (t, h) = (row / gi.h, row % gi.h);
        for wi in 0..gi.w {
            let d = &mut d_row[wi * c..(wi + 1) * c];
            for (tap, &(dt, dh, dw)) in offsets.iter().enumerate() {
                let Some(dst) = shifted(&gi, t, h, wi, (-dt, -dh, -dw)) else { continue };
                let gr = &g[dst * c..(dst + 1) * c];
                let wr = &w[tap * c..(tap + 1) * c];
                for ci in 0..c {
                    d[ci] += wr[ci] * gr[ci];
                }
            }
        }
    });
    let mut dw = vec![0.0; k.taps() * c];
    dw.par_chunks_mut(c).enumerate().for_each(|(tap, dwt)| {
        let d = offsets[tap];
        for t in 0..gi.t {
            for h in 0..gi.h {
                for wi in 0..gi.w {
                    let Some(src) = shifted(&gi, t, h, wi, d) else { continue };
                    let q = (t * gi.h + h) * gi.w + wi;
                    for ci in 0..c {
                        dwt[ci] += x[src * c + ci] * g[q * c + ci];
                    }
                }
            }
        }
    });
    (dx, dw, sum_rows(g, c))
}

// ---------------------------------------------------------------- resampling

/// 2×2 spatial max-pool; ties resolve to the first position in
/// `(0,0), (0,1), (1,0), (1,1)` order. Returns `(out, argmax)`.
pub fn maxpool2_forward(x: &[f64], gi: Geom) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow, c) = (gi.h / 2, gi.w / 2, gi.c);
    let n = gi.t * oh * ow * c;
    let mut out = vec![0.0; n];
    let mut arg = vec![0usize; n];
    for t in 0..gi.t {
        for h in 0..oh {
            for w in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (((t * gi.h + 2 * h + dh) * gi.w) + 2 * w + dw) * c + ci;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    let o = ((t * oh + h) * ow + w) * c + ci;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample2_forward(x: &[f64], gi: Geom) -> Vec<f64> {
    let (oh, ow, c) = (gi.h * 2, gi.w * 2, gi.c);
    let mut out = vec![0.0; gi.t * oh * ow * c];
    for t in 0..gi.t {
        for h in 0..oh {
            for w in 0..ow {
                let src = ((t * gi.h + h / 2) * gi.w + w / 2) * c;
                let dst = ((t * oh + h) * ow + w) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &[f64], gi: Geom) -> Vec<f64> {
    let (oh, ow, c) = (gi.h * 2, gi.w * 2, gi.c);
    let mut dx = vec![0.0; gi.len()];
    for t in 0..gi.t {
        for h in 0..oh {
            for w in 0..ow {
                let src = ((t * gi.h + h / 2) * gi.w + w / 2) * c;
                let dst = ((t * oh + h) * ow + w) * c;
                for ci in 0..c {
                    dx[src + ci] += g[dst + ci];
                }
            }
        }
    }
    dx
}
