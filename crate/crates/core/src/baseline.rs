//! Training-free reconstruction: a GAP-TV-like iteration, CFA expansion and
//! bilinear demosaicing.

use crate::cfa::{CfaPattern, Site};
use crate::cube::VideoCube;
use crate::error::{Error, Result};
use crate::sensing::{apply_phi, apply_phi_transpose, devectorize, initialize, vectorize, MaskSet, Measurement, INIT_EPS};

pub const TV_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapConfig {
    pub iterations: usize,
    pub tv_weight: f64,
    pub tv_inner_steps: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            tv_weight: 0.02,
            tv_inner_steps: 20,
        }
    }
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("GAP needs ≥ 1 iteration".into()));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::Config(format!("TV weight must be ≥ 0, got {}", self.tv_weight)));
        }
        Ok(())
    }
}

/// Reconstruction plus `‖y − Φx‖²` after each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct GapResult {
    pub raw: VideoCube,
    pub residuals: Vec<f64>,
}

pub fn measurement_residual(meas: &Measurement, masks: &MaskSet, x: &[f64]) -> Result<f64> {
    let phi_x = apply_phi(masks, x)?;
    Ok(meas.y.data().iter().zip(&phi_x).map(|(y, p)| (y - p) * (y - p)).sum())
}

pub fn gap_tv(meas: &Measurement, masks: &MaskSet, cfg: &GapConfig) -> Result<VideoCube> {
    Ok(gap_tv_traced(meas, masks, cfg)?.raw)
}

/// Alternates the diagonal-weighted projection onto `y = Φx` with a few
/// gradient steps on `½‖z − v‖² + λ·TV(z)`.
pub fn gap_tv_traced(meas: &Measurement, masks: &MaskSet, cfg: &GapConfig) -> Result<GapResult> {
    cfg.validate()?;
    if masks.sum_t().iter().all(|&s| s == 0.0) {
        return Err(Error::DegenerateSensing("every pixel has Σ_t M_t = 0".into()));
    }
    let (h, w, t) = (masks.height(), masks.width(), masks.frames());
    let mut x = vectorize(&initialize(meas, masks)?);
    let y = meas.y.data();
    let sum = masks.sum_t();
    let mut residuals = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let phi_x = apply_phi(masks, &x)?;
        let r: Vec<f64> = (0..y.len()).map(|p| (y[p] - phi_x[p]) / (sum[p] + INIT_EPS)).collect();
        for (xi, c) in x.iter_mut().zip(apply_phi_transpose(masks, &r)?) {
            *xi += c;
        }
        if cfg.tv_weight > 0.0 {
            x = tv_denoise(&x, h, w, t, cfg.tv_weight, cfg.tv_inner_steps);
        }
        let res = measurement_residual(meas, masks, &x)?;
        if !res.is_finite() {
            return Err(Error::Numeric("GAP residual became non-finite".into()));
        }
        residuals.push(res);
    }
    Ok(GapResult {
        raw: devectorize(&x, h, w, t)?,
        residuals,
    })
}

/// Subgradient descent on anisotropic space-time TV, frame-stacked layout.
pub fn tv_denoise(v: &[f64], h: usize, w: usize, t: usize, lambda: f64, steps: usize) -> Vec<f64> {
    let hw = h * w;
    let mut z = v.to_vec();
    let mut g = vec![0.0; z.len()];
    let sgn = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    for _ in 0..steps {
        for i in 0..z.len() {
            g[i] = z[i] - v[i];
        }
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    let i = ti * hw + hi * w + wi;
                    let mut push = |j: usize| {
                        let s = lambda * sgn(z[j] - z[i]);
                        g[j] += s;
                        g[i] -= s;
                    };
                    if wi + 1 < w {
                        push(i + 1);
                    }
                    if hi + 1 < h {
                        push(i + w);
                    }
                    if ti + 1 < t {
                        push(i + hw);
                    }
                }
            }
        }
        for i in 0..z.len() {
            z[i] -= TV_STEP * g[i];
        }
    }
    z
}

/// Splits raw `H × W × 1 × T` into R, G, B planes, zero where the channel
/// is not sampled.
pub fn expand_cfa(raw: &VideoCube, pattern: CfaPattern) -> Result<VideoCube> {
    let [h, w, c, t] = raw.hwct();
    if c != 1 {
        return Err(Error::Shape(format!("expand_cfa needs one channel, got {c}")));
    }
    pattern.check_dims(h, w)?;
    Ok(VideoCube::from_fn(h, w, 3, t, |hi, wi, ci, ti| {
        if pattern.channel_at(hi, wi) == ci {
            raw.at(hi, wi, 0, ti)
        } else {
            0.0
        }
    }))
}

/// Linear interpolation along one line from the flagged positions; constant
/// beyond the outermost samples.
fn fill_line(line: &mut [f64], sampled: &[bool]) {
    let idx: Vec<usize> = (0..line.len()).filter(|&i| sampled[i]).collect();
    let (Some(&first), Some(&last)) = (idx.first(), idx.last()) else {
        return;
    };
    let mut k = 0;
    for i in 0..line.len() {
        if sampled[i] {
            continue;
        }
        line[i] = if i < first {
            line[first]
        } else if i > last {
            line[last]
        } else {
            while idx[k + 1] < i {
                k += 1;
            }
            let (a, b) = (idx[k], idx[k + 1]);
            let f = (i - a) as f64 / (b - a) as f64;
            line[a] + f * (line[b] - line[a])
        };
    }
}

/// Fills an `h × w` plane from samples on the product set `rows × cols`:
/// along sampled rows first, then down every column.
fn fill_product(plane: &[f64], h: usize, w: usize, rows: &[bool], cols: &[bool]) -> Vec<f64> {
    let mut out = plane.to_vec();
    for hi in (0..h).filter(|&r| rows[r]) {
        fill_line(&mut out[hi * w..(hi + 1) * w], cols);
    }
    let mut col = vec![0.0; h];
    for wi in 0..w {
        for hi in 0..h {
            col[hi] = out[hi * w + wi];
        }
        fill_line(&mut col, rows);
        for hi in 0..h {
            out[hi * w + wi] = col[hi];
        }
    }
    out
}

/// Each CFA site class samples a product of periodic rows and columns.
fn site_lines(pattern: CfaPattern, site: Site, h: usize, w: usize) -> (Vec<bool>, Vec<bool>) {
    let rows = (0..h).map(|hi| (0..w).any(|wi| pattern.site(hi, wi) == site)).collect();
    let cols = (0..w).map(|wi| (0..h).any(|hi| pattern.site(hi, wi) == site)).collect();
    (rows, cols)
}

/// Per-channel bilinear fill of an [`expand_cfa`] result. Green, sampled on
/// two site classes, is the mean of the fills from each class.
pub fn demosaic_bilinear(sparse: &VideoCube, pattern: CfaPattern) -> Result<VideoCube> {
    let [h, w, c, t] = sparse.hwct();
    if c != 3 {
        return Err(Error::Shape(format!("demosaic needs 3 channels, got {c}")));
    }
    pattern.check_dims(h, w)?;
    let classes: [&[Site]; 3] = [&[Site::R], &[Site::G1, Site::G2], &[Site::B]];
    let mut out = sparse.clone();
    for (ci, sites) in classes.iter().enumerate() {
        let lines: Vec<_> = sites.iter().map(|&s| site_lines(pattern, s, h, w)).collect();
        for ti in 0..t {
            let plane: Vec<f64> = (0..h * w).map(|p| sparse.at(p / w, p % w, ci, ti)).collect();
            let mut acc = vec![0.0; h * w];
            for (rows, cols) in &lines {
                for (a, v) in acc.iter_mut().zip(fill_product(&plane, h, w, rows, cols)) {
                    *a += v;
                }
            }
            for p in 0..h * w {
                let (hi, wi) = (p / w, p % w);
                if pattern.channel_at(hi, wi) != ci {
                    out.set(hi, wi, ci, ti, acc[p] / lines.len() as f64);
                }
            }
        }
    }
    Ok(out)
}
