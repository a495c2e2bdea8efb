//! Full-reference quality metrics over `H × W × C × T` cubes.
//!
//! PSNR uses peak 1.0 and is computed per frame over all pixels and channels,
//! then averaged over frames. SSIM uses an 11×11 Gaussian window (σ = 1.5),
//! `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.0, valid windows only, computed
//! per channel and frame and then averaged.

use crate::cube::VideoCube;
use crate::error::{Error, Result};

/// PSNR reported when the per-frame MSE falls below [`MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
}

impl QualityReport {
    pub fn summary(&self) -> String {
        format!("PSNR {:.2} dB  SSIM {:.4}", self.psnr_db, self.ssim)
    }
}

fn check_dims(reference: &VideoCube, test: &VideoCube) -> Result<[usize; 4]> {
    if reference.hwct() != test.hwct() {
        return Err(Error::Shape(format!(
            "reference dims {:?} differ from test dims {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    Ok(reference.hwct())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr_per_frame(reference: &VideoCube, test: &VideoCube) -> Result<Vec<f64>> {
    let [h, w, c, t] = check_dims(reference, test)?;
    let mut sq = vec![0.0; t];
    for (i, (a, b)) in reference.data().iter().zip(test.data()).enumerate() {
        sq[i % t] += (a - b) * (a - b);
    }
    let n = (h * w * c) as f64;
    Ok(sq.into_iter().map(|s| psnr_from_mse(s / n)).collect())
}

pub fn psnr(reference: &VideoCube, test: &VideoCube) -> Result<f64> {
    let frames = psnr_per_frame(reference, test)?;
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, tap) in taps.iter().enumerate() {
                acc += tap * plane[y * w + x + j];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, tap) in taps.iter().enumerate() {
                acc += tap * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let e_aa = filter_valid(&aa, h, w, taps);
    let e_bb = filter_valid(&bb, h, w, taps);
    let e_ab = filter_valid(&ab, h, w, taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

pub fn ssim_per_frame(reference: &VideoCube, test: &VideoCube) -> Result<Vec<f64>> {
    let [h, w, c, t] = check_dims(reference, test)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let mut acc = 0.0;
        for ci in 0..c {
            let a: Vec<f64> = (0..h * w).map(|p| reference.at(p / w, p % w, ci, ti)).collect();
            let b: Vec<f64> = (0..h * w).map(|p| test.at(p / w, p % w, ci, ti)).collect();
            acc += ssim_plane(&a, &b, h, w, &taps);
        }
        frames.push(acc / c as f64);
    }
    Ok(frames)
}

pub fn ssim(reference: &VideoCube, test: &VideoCube) -> Result<f64> {
    let frames = ssim_per_frame(reference, test)?;
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

pub fn quality_report(reference: &VideoCube, test: &VideoCube) -> Result<QualityReport> {
    let per_frame_psnr = psnr_per_frame(reference, test)?;
    let per_frame_ssim = ssim_per_frame(reference, test)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(QualityReport {
        psnr_db: mean(&per_frame_psnr),
        ssim: mean(&per_frame_ssim),
        per_frame_psnr,
        per_frame_ssim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_cube(h: usize, w: usize, c: usize, t: usize, seed: u64) -> VideoCube {
        let mut rng = SplitMix64::new(seed);
        VideoCube::from_fn(h, w, c, t, |_, _, _, _| rng.uniform())
    }

    /// Per-window SSIM straight from the definition, no separable filtering.
    fn ssim_oracle(a: &VideoCube, b: &VideoCube) -> f64 {
        let [h, w, c, t] = a.hwct();
        let g = gaussian_taps(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut frame_sum = 0.0;
        for ti in 0..t {
            let mut chan_sum = 0.0;
            for ci in 0..c {
                let mut sum = 0.0;
                let mut count = 0;
                for y0 in 0..=h - 11 {
                    for x0 in 0..=w - 11 {
                        let (mut ma, mut mb) = (0.0, 0.0);
                        for dy in 0..11 {
                            for dx in 0..11 {
                                let wt = g[dy] * g[dx];
                                ma += wt * a.at(y0 + dy, x0 + dx, ci, ti);
                                mb += wt * b.at(y0 + dy, x0 + dx, ci, ti);
                            }
                        }
                        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                        for dy in 0..11 {
                            for dx in 0..11 {
                                let wt = g[dy] * g[dx];
                                let da = a.at(y0 + dy, x0 + dx, ci, ti) - ma;
                                let db = b.at(y0 + dy, x0 + dx, ci, ti) - mb;
                                va += wt * da * da;
                                vb += wt * db * db;
                                cov += wt * da * db;
                            }
                        }
                        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                        count += 1;
                    }
                }
                chan_sum += sum / count as f64;
            }
            frame_sum += chan_sum / c as f64;
        }
        frame_sum / t as f64
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = random_cube(4, 4, 3, 2, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn psnr_uniform_offsets() {
        let r = VideoCube::filled(&[8, 8, 3, 2], 0.5);
        let t1 = VideoCube::filled(&[8, 8, 3, 2], 0.6);
        let t2 = VideoCube::filled(&[8, 8, 3, 2], 0.75);
        assert!((psnr(&r, &t1).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&r, &t2).unwrap() - 12.041199826559248).abs() < 1e-9);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = VideoCube::zeros(&[4, 4, 1, 2]);
        let b = VideoCube::zeros(&[4, 4, 1, 3]);
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_self_is_one() {
        let a = random_cube(16, 16, 3, 2, 5);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_planes() {
        let a = VideoCube::filled(&[12, 12, 1, 1], 0.0);
        let b = VideoCube::filled(&[12, 12, 1, 1], 1.0);
        let expected = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_oracle() {
        let a = random_cube(16, 16, 1, 1, 11);
        let b = random_cube(16, 16, 1, 1, 12);
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-9);

        let a = random_cube(13, 17, 3, 2, 21);
        let b = a.map(|v| (v + 0.1 * (v * 37.0).sin()).clamp(0.0, 1.0));
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric() {
        let a = random_cube(14, 14, 3, 2, 31);
        let b = random_cube(14, 14, 3, 2, 32);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_small_frame_rejected() {
        let a = VideoCube::zeros(&[10, 16, 1, 1]);
        assert!(matches!(ssim(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn psnr_symmetric() {
        let a = random_cube(5, 5, 3, 3, 41);
        let b = random_cube(5, 5, 3, 3, 42);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
