//! CACTI sensing: binary coded masks, snapshot measurement synthesis, the
//! vectorized operator Φ and the normalized-measurement initialization.
//!
//! Vectorization convention: `vec(X_t)` walks a frame in row-major raster
//! order, and the video vector stacks frames, so element `(h, w, t)` sits at
//! `t·H·W + h·W + w`. With that ordering Φ = `[D_1, …, D_T]` where
//! `D_t = diag(vec(M_t))`.

use crate::cube::VideoCube;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Floor applied to `Σ_t M_t` wherever it is divided by.
pub const INIT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: VideoCube,
    sum_t: Vec<f64>,
    sum_sq_t: Vec<f64>,
    seed: u64,
}

impl MaskSet {
    /// Wraps an existing `H × W × 1 × T` binary cube.
    pub fn from_cube(masks: VideoCube, seed: u64) -> Result<Self> {
        let [h, w, c, t] = masks.hwct();
        if c != 1 || masks.dims().len() != 4 {
            return Err(Error::Shape(format!(
                "masks must be H×W×1×T, got {:?}",
                masks.dims()
            )));
        }
        if let Some(v) = masks.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        let mut sum_t = vec![0.0; h * w];
        let mut sum_sq_t = vec![0.0; h * w];
        for p in 0..h * w {
            for ti in 0..t {
                let m = masks.data()[p * t + ti];
                sum_t[p] += m;
                sum_sq_t[p] += m * m;
            }
        }
        Ok(Self {
            masks,
            sum_t,
            sum_sq_t,
            seed,
        })
    }

    pub fn masks(&self) -> &VideoCube {
        &self.masks
    }

    pub fn sum_t(&self) -> &[f64] {
        &self.sum_t
    }

    pub fn sum_sq_t(&self) -> &[f64] {
        &self.sum_sq_t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn height(&self) -> usize {
        self.masks.hwct()[0]
    }

    pub fn width(&self) -> usize {
        self.masks.hwct()[1]
    }

    pub fn frames(&self) -> usize {
        self.masks.hwct()[3]
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, t: usize) -> f64 {
        self.masks.at(h, w, 0, t)
    }

    fn check_raw(&self, raw: &VideoCube) -> Result<()> {
        let [h, w, c, t] = raw.hwct();
        let [mh, mw, _, mt] = self.masks.hwct();
        if c != 1 || (h, w, t) != (mh, mw, mt) {
            return Err(Error::Shape(format!(
                "video dims {:?} do not match mask dims {:?}",
                raw.dims(),
                self.masks.dims()
            )));
        }
        Ok(())
    }
}

/// Snapshot `Y`, `H × W × 1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: VideoCube,
    pub compression_ratio: usize,
    pub noise_sigma: f64,
}

impl Measurement {
    pub fn new(y: VideoCube, compression_ratio: usize, noise_sigma: f64) -> Result<Self> {
        let [_, _, c, t] = y.hwct();
        if c != 1 || t != 1 {
            return Err(Error::Shape(format!(
                "measurement must be H×W×1×1, got {:?}",
                y.dims()
            )));
        }
        let [h, w, _, _] = y.hwct();
        Ok(Self {
            y: y.reshape(&[h, w, 1, 1])?,
            compression_ratio,
            noise_sigma,
        })
    }

    fn check_masks(&self, masks: &MaskSet) -> Result<()> {
        let [h, w, _, _] = self.y.hwct();
        if (h, w) != (masks.height(), masks.width()) {
            return Err(Error::Shape(format!(
                "measurement dims {:?} do not match mask dims {:?}",
                self.y.dims(),
                masks.masks().dims()
            )));
        }
        Ok(())
    }
}

/// I.i.d. Bernoulli(0.5) masks. Values are drawn with [`SplitMix64::bit`] in
/// storage order `(h, w, t)`, `t` fastest.
pub fn gen_masks(h: usize, w: usize, t: usize, seed: u64) -> Result<MaskSet> {
    if h == 0 || w == 0 || t == 0 {
        return Err(Error::Config(format!("mask dims must be positive, got {h}×{w}×{t}")));
    }
    let mut rng = SplitMix64::new(seed);
    let data = (0..h * w * t)
        .map(|_| if rng.bit() { 1.0 } else { 0.0 })
        .collect();
    MaskSet::from_cube(VideoCube::new(&[h, w, 1, t], data)?, seed)
}

/// `Y = Σ_t M_t ⊙ X_t + N` with `N ~ Normal(0, σ²)` drawn in raster order
/// from `SplitMix64::new(seed)`. `σ = 0` draws nothing.
pub fn encode(raw: &VideoCube, masks: &MaskSet, noise_sigma: f64, seed: u64) -> Result<Measurement> {
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be ≥ 0, got {noise_sigma}")));
    }
    masks.check_raw(raw)?;
    let [h, w, _, t] = raw.hwct();
    let mut y = vec![0.0; h * w];
    for (p, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ti in 0..t {
            acc += masks.masks().data()[p * t + ti] * raw.data()[p * t + ti];
        }
        *out = acc;
    }
    if noise_sigma > 0.0 {
        let mut rng = SplitMix64::new(seed);
        for v in &mut y {
            *v += noise_sigma * rng.normal();
        }
    }
    Measurement::new(VideoCube::new(&[h, w, 1, 1], y)?, t, noise_sigma)
}

/// Flattens an `H × W × 1 × T` cube into the frame-stacked vector.
pub fn vectorize(raw: &VideoCube) -> Vec<f64> {
    let [h, w, _, t] = raw.hwct();
    let mut out = vec![0.0; h * w * t];
    for p in 0..h * w {
        for ti in 0..t {
            out[ti * h * w + p] = raw.data()[p * t + ti];
        }
    }
    out
}

pub fn devectorize(x: &[f64], h: usize, w: usize, t: usize) -> Result<VideoCube> {
    if x.len() != h * w * t {
        return Err(Error::Shape(format!(
            "vector of length {} cannot fill {h}×{w}×1×{t}",
            x.len()
        )));
    }
    Ok(VideoCube::from_fn(h, w, 1, t, |hi, wi, _, ti| x[ti * h * w + hi * w + wi]))
}

/// `Φx` without forming Φ.
pub fn apply_phi(masks: &MaskSet, x: &[f64]) -> Result<Vec<f64>> {
    let (h, w, t) = (masks.height(), masks.width(), masks.frames());
    let hw = h * w;
    if x.len() != hw * t {
        return Err(Error::Shape(format!(
            "Φ expects a vector of length {}, got {}",
            hw * t,
            x.len()
        )));
    }
    let m = masks.masks().data();
    let mut y = vec![0.0; hw];
    for ti in 0..t {
        for p in 0..hw {
            y[p] += m[p * t + ti] * x[ti * hw + p];
        }
    }
    Ok(y)
}

/// `Φᵀy` without forming Φ.
pub fn apply_phi_transpose(masks: &MaskSet, y: &[f64]) -> Result<Vec<f64>> {
    let (h, w, t) = (masks.height(), masks.width(), masks.frames());
    let hw = h * w;
    if y.len() != hw {
        return Err(Error::Shape(format!(
            "Φᵀ expects a vector of length {hw}, got {}",
            y.len()
        )));
    }
    let m = masks.masks().data();
    let mut x = vec![0.0; hw * t];
    for ti in 0..t {
        for p in 0..hw {
            x[ti * hw + p] = m[p * t + ti] * y[p];
        }
    }
    Ok(x)
}

/// `X_in = M ⊙ (Y ⊘ max(Σ_t M_t, ε))`, an `H × W × 1 × T` cube.
pub fn initialize(meas: &Measurement, masks: &MaskSet) -> Result<VideoCube> {
    meas.check_masks(masks)?;
    let (h, w, t) = (masks.height(), masks.width(), masks.frames());
    let y = meas.y.data();
    let sum = masks.sum_t();
    Ok(VideoCube::from_fn(h, w, 1, t, |hi, wi, _, ti| {
        let p = hi * w + wi;
        masks.at(hi, wi, ti) * (y[p] / sum[p].max(INIT_EPS))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_case() -> (VideoCube, MaskSet) {
        // frames [[1,2],[3,4]] and [[5,6],[7,8]]
        let raw = VideoCube::from_fn(2, 2, 1, 2, |h, w, _, t| (4 * t + 2 * h + w + 1) as f64);
        let m = [[[1.0, 0.0], [1.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]];
        let masks = VideoCube::from_fn(2, 2, 1, 2, |h, w, _, t| m[t][h][w]);
        (raw, MaskSet::from_cube(masks, 0).unwrap())
    }

    fn random_instance(h: usize, w: usize, t: usize, seed: u64) -> (VideoCube, MaskSet) {
        let masks = gen_masks(h, w, t, seed).unwrap();
        let mut rng = SplitMix64::new(seed ^ 0xABCD);
        let raw = VideoCube::from_fn(h, w, 1, t, |_, _, _, _| rng.uniform());
        (raw, masks)
    }

    #[test]
    fn masks_deterministic_and_binary() {
        let a = gen_masks(16, 8, 4, 42).unwrap();
        let b = gen_masks(16, 8, 4, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.masks().data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(a.sum_t(), a.sum_sq_t());
        assert_ne!(a, gen_masks(16, 8, 4, 43).unwrap());
    }

    #[test]
    fn mask_mean_concentrates() {
        for seed in [0u64, 1, 7, 12345, u64::MAX] {
            let m = gen_masks(64, 64, 8, seed).unwrap();
            let mean = m.masks().data().iter().sum::<f64>() / m.masks().len() as f64;
            assert!((mean - 0.5).abs() <= 0.02, "seed {seed} mean {mean}");
        }
    }

    #[test]
    fn encode_identity_sensing() {
        let raw = VideoCube::from_fn(4, 4, 1, 1, |h, w, _, _| (h * 4 + w) as f64 / 16.0);
        let masks = MaskSet::from_cube(VideoCube::filled(&[4, 4, 1, 1], 1.0), 0).unwrap();
        let meas = encode(&raw, &masks, 0.0, 0).unwrap();
        assert_eq!(meas.y.data(), raw.data());
        assert_eq!(meas.compression_ratio, 1);
    }

    #[test]
    fn encode_hand_summation() {
        let (raw, masks) = hand_case();
        let meas = encode(&raw, &masks, 0.0, 0).unwrap();
        assert_eq!(meas.y.data(), &[1.0, 6.0, 10.0, 4.0]);
        assert_eq!(meas, encode(&raw, &masks, 0.0, 0).unwrap());
    }

    #[test]
    fn encode_errors() {
        let (raw, masks) = hand_case();
        assert!(matches!(encode(&raw, &masks, -0.1, 0), Err(Error::Config(_))));
        let other = VideoCube::zeros(&[2, 4, 1, 2]);
        assert!(matches!(encode(&other, &masks, 0.0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_noise_is_seeded() {
        let (raw, masks) = random_instance(8, 8, 2, 5);
        let a = encode(&raw, &masks, 0.05, 9).unwrap();
        let b = encode(&raw, &masks, 0.05, 9).unwrap();
        let c = encode(&raw, &masks, 0.05, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn phi_matches_dense_matrix() {
        let (raw, masks) = random_instance(4, 4, 3, 77);
        let (hw, t) = (16, 3);
        // Dense Φ = [D_1, …, D_T].
        let mut phi = vec![vec![0.0; hw * t]; hw];
        for ti in 0..t {
            for p in 0..hw {
                phi[p][ti * hw + p] = masks.at(p / 4, p % 4, ti);
            }
        }
        let x = vectorize(&raw);
        let dense: Vec<f64> = phi
            .iter()
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        let fast = apply_phi(&masks, &x).unwrap();
        assert_eq!(fast, dense);
        let meas = encode(&raw, &masks, 0.0, 0).unwrap();
        assert_eq!(fast, meas.y.data());

        let y: Vec<f64> = (0..hw).map(|i| i as f64 * 0.5 - 3.0).collect();
        let dense_t: Vec<f64> = (0..hw * t).map(|j| (0..hw).map(|i| phi[i][j] * y[i]).sum()).collect();
        assert_eq!(apply_phi_transpose(&masks, &y).unwrap(), dense_t);
    }

    #[test]
    fn phi_phit_is_diagonal_sum() {
        let masks = gen_masks(4, 4, 3, 8).unwrap();
        for i in 0..16 {
            let mut e = vec![0.0; 16];
            e[i] = 1.0;
            let col = apply_phi(&masks, &apply_phi_transpose(&masks, &e).unwrap()).unwrap();
            for (j, &v) in col.iter().enumerate() {
                let expected = if i == j { masks.sum_sq_t()[i] } else { 0.0 };
                assert_eq!(v, expected);
            }
            assert_eq!(masks.sum_sq_t()[i], masks.sum_t()[i]);
        }
    }

    #[test]
    fn zero_masks_annihilate() {
        let masks = MaskSet::from_cube(VideoCube::zeros(&[4, 4, 1, 2]), 0).unwrap();
        let x: Vec<f64> = (0..32).map(|i| i as f64).collect();
        assert!(apply_phi(&masks, &x).unwrap().iter().all(|&v| v == 0.0));
        assert!(apply_phi(&masks, &x[..31]).is_err());
    }

    #[test]
    fn initialize_cases() {
        let (raw, masks) = hand_case();
        let meas = encode(&raw, &masks, 0.0, 0).unwrap();
        let x = initialize(&meas, &masks).unwrap();
        assert_eq!(vectorize(&x), vec![1.0, 0.0, 5.0, 4.0, 0.0, 6.0, 5.0, 0.0]);

        let full = MaskSet::from_cube(VideoCube::filled(&[2, 2, 1, 4], 1.0), 0).unwrap();
        let raw = VideoCube::from_fn(2, 2, 1, 4, |h, w, _, t| (h + w + t) as f64);
        let meas = encode(&raw, &full, 0.0, 0).unwrap();
        let x = initialize(&meas, &full).unwrap();
        for p in 0..4 {
            for t in 0..4 {
                assert_eq!(x.at(p / 2, p % 2, 0, t), meas.y.data()[p] / 4.0);
            }
        }

        let one = MaskSet::from_cube(VideoCube::filled(&[2, 2, 1, 1], 1.0), 0).unwrap();
        let raw = VideoCube::from_fn(2, 2, 1, 1, |h, w, _, _| (h * 2 + w) as f64 * 0.3);
        let x = initialize(&encode(&raw, &one, 0.0, 0).unwrap(), &one).unwrap();
        assert_eq!(x, raw);
    }

    #[test]
    fn initialize_zero_where_mask_zero() {
        let (raw, masks) = random_instance(8, 8, 4, 3);
        let x = initialize(&encode(&raw, &masks, 0.0, 0).unwrap(), &masks).unwrap();
        for (xv, mv) in x.data().iter().zip(masks.masks().data()) {
            assert!(xv.is_finite());
            if *mv == 0.0 {
                assert_eq!(*xv, 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn encode_equals_phi(h in 1usize..=8, w in 1usize..=8, t in 1usize..=4, seed in any::<u64>()) {
            let (raw, masks) = random_instance(h, w, t, seed);
            let y = encode(&raw, &masks, 0.0, 0).unwrap();
            let phi = apply_phi(&masks, &vectorize(&raw)).unwrap();
            prop_assert_eq!(phi.as_slice(), y.y.data());
        }

        #[test]
        fn encode_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (r1, masks) = random_instance(6, 6, 3, seed);
            let (r2, _) = random_instance(6, 6, 3, seed.wrapping_add(1));
            let combo = VideoCube::new(&[6, 6, 1, 3],
                r1.data().iter().zip(r2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = encode(&combo, &masks, 0.0, 0).unwrap();
            let y1 = encode(&r1, &masks, 0.0, 0).unwrap();
            let y2 = encode(&r2, &masks, 0.0, 0).unwrap();
            for i in 0..36 {
                let rhs = a * y1.y.data()[i] + b * y2.y.data()[i];
                prop_assert!((lhs.y.data()[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
