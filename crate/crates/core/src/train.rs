//! Adam, synthetic moving-square clips, and the staged toy training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::{Geom, Tape};
use crate::cfa::{mosaic, CfaPattern};
use crate::cube::VideoCube;
use crate::error::{Error, Result};
use crate::feature::Feature;
use crate::metrics::psnr;
use crate::network::{Model, NetworkConfig, Variant, OUTPUT_CHANNELS};
use crate::rng::SplitMix64;
use crate::sensing::{encode, gen_masks, initialize};
use crate::weights::{Binder, WeightMap};

pub type GradMap = BTreeMap<String, Vec<f64>>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: GradMap,
    pub v: GradMap,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(weights: &WeightMap, lr: f64) -> Self {
        let zeros: GradMap = weights.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update of every weight.
pub fn adam_step(weights: &mut WeightMap, grads: &GradMap, state: &mut OptimState) -> Result<()> {
    if grads.len() != weights.len() || state.m.len() != weights.len() {
        return Err(Error::Contract(format!(
            "adam: {} weights, {} gradients, {} moments",
            weights.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (key, t) in weights.iter() {
        let g = grads.get(key).ok_or_else(|| Error::Contract(format!("adam: no gradient for `{key}`")))?;
        let m = state.m.get(key).ok_or_else(|| Error::Contract(format!("adam: no moment for `{key}`")))?;
        if g.len() != t.len() || m.len() != t.len() {
            return Err(Error::Contract(format!(
                "adam: `{key}` has {} values, gradient {}, moment {}",
                t.len(),
                g.len(),
                m.len()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (key, t) in weights.iter_mut() {
        let g = &grads[key];
        let m = state.m.get_mut(key).unwrap();
        let v = state.v.get_mut(key).unwrap();
        for i in 0..t.data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            t.data[i] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Synthetic clip parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub pattern: CfaPattern,
    pub noise_sigma: f64,
    pub squares: usize,
    /// Clips in the training pool.
    pub pool_size: usize,
}

impl Default for ToyDataSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 4,
            pattern: CfaPattern::QuadBayer,
            noise_sigma: 0.0,
            squares: 2,
            pool_size: 8,
        }
    }
}

/// A clip with its measurement and network input.
#[derive(Debug, Clone)]
pub struct ToySample {
    /// Ground truth, `H × W × 3 × T`.
    pub rgb: VideoCube,
    /// Mask-weighted measurement back-projection, `H × W × 1 × T`.
    pub init: VideoCube,
}

/// RGB clip of solid squares sliding over a two-tone gradient background.
pub fn moving_squares(spec: &ToyDataSpec, rng: &mut SplitMix64) -> VideoCube {
    let (h, w, t) = (spec.height, spec.width, spec.frames);
    let mut colour = || [rng.uniform_range(0.1, 0.9), rng.uniform_range(0.1, 0.9), rng.uniform_range(0.1, 0.9)];
    let bg0 = colour();
    let bg1 = colour();
    let squares: Vec<_> = (0..spec.squares)
        .map(|_| {
            let col = [rng.uniform_range(0.0, 1.0), rng.uniform_range(0.0, 1.0), rng.uniform_range(0.0, 1.0)];
            let side = rng.uniform_range(0.2, 0.4) * h.min(w) as f64;
            let y0 = rng.uniform_range(0.0, h as f64 - side);
            let x0 = rng.uniform_range(0.0, w as f64 - side);
            let vy = rng.uniform_range(-2.0, 2.0);
            let vx = rng.uniform_range(-2.0, 2.0);
            (col, side, y0, x0, vy, vx)
        })
        .collect();
    VideoCube::from_fn(h, w, 3, t, |hi, wi, ci, ti| {
        let mut v = bg0[ci] + (bg1[ci] - bg0[ci]) * (hi + wi) as f64 / (h + w - 2).max(1) as f64;
        for (col, side, y0, x0, vy, vx) in &squares {
            let y = y0 + vy * ti as f64;
            let x = x0 + vx * ti as f64;
            let (py, px) = (hi as f64 + 0.5, wi as f64 + 0.5);
            if py >= y && py < y + side && px >= x && px < x + side {
                v = col[ci];
            }
        }
        v
    })
}

/// Clip `index` of the stream named by `seed`: its own content, mask and
/// noise, all derived from `(seed, index)`.
pub fn toy_sample(spec: &ToyDataSpec, seed: u64, index: u64) -> Result<ToySample> {
    let mut rng = SplitMix64::derive(seed, 3 * index);
    let rgb = moving_squares(spec, &mut rng);
    let raw = mosaic(&rgb, spec.pattern)?;
    let mask_seed = SplitMix64::derive(seed, 3 * index + 1).next_u64();
    let noise_seed = SplitMix64::derive(seed, 3 * index + 2).next_u64();
    let masks = gen_masks(spec.height, spec.width, spec.frames, mask_seed)?;
    let meas = encode(&raw, &masks, spec.noise_sigma, noise_seed)?;
    let init = initialize(&meas, &masks)?;
    Ok(ToySample { rgb, init })
}

/// Samples `0..n` of a stream; synthesized in parallel, returned in index order.
pub fn toy_pool(spec: &ToyDataSpec, seed: u64, n: usize) -> Result<Vec<ToySample>> {
    (0..n as u64).into_par_iter().map(|i| toy_sample(spec, seed, i)).collect()
}

/// MSE of the network output against `sample.rgb`, its gradient, and the
/// unclamped output.
pub fn loss_and_grads(model: &Model, sample: &ToySample) -> Result<(f64, GradMap, VideoCube)> {
    let input = Feature::from_cube(&sample.init);
    let target = Feature::from_cube(&sample.rgb);
    let mut tape = Tape::new();
    let mut bind = Binder::new(&model.weights);
    let x = tape.leaf(&input.geom.shape(), input.data);
    let y = model.record(&mut tape, &mut bind, x, input.geom, None)?;
    let out = Feature::new(input.geom.with_channels(OUTPUT_CHANNELS), tape.value(y).to_vec())?.to_cube();
    let loss = tape.mse(y, &target.data);
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?.named();
    Ok((value, grads, out))
}

/// Clamps to `[0, 1]` for reporting.
pub fn clamp_unit(cube: &VideoCube) -> VideoCube {
    cube.map(|v| v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub lr: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub data: ToyDataSpec,
    pub stages: Vec<Stage>,
}

impl TrainConfig {
    /// 5e-4 / 1e-4 / 1e-5 for 200 / 50 / 50 iterations.
    pub fn default_for(variant: Variant, data: ToyDataSpec) -> Self {
        let network = NetworkConfig::new(variant, data.height, data.width, data.frames);
        Self {
            network,
            data,
            stages: vec![
                Stage { lr: 5e-4, iters: 200 },
                Stage { lr: 1e-4, iters: 50 },
                Stage { lr: 1e-5, iters: 50 },
            ],
        }
    }

    pub fn total_iters(&self) -> usize {
        self.stages.iter().map(|s| s.iters).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let d = &self.data;
        if (d.height, d.width, d.frames) != (self.network.height, self.network.width, self.network.frames) {
            return Err(Error::Config("data and network dimensions differ".into()));
        }
        if d.pool_size == 0 {
            return Err(Error::Config("training pool must hold ≥ 1 clip".into()));
        }
        if self.stages.iter().any(|s| !(s.lr >= 0.0 && s.lr.is_finite())) {
            return Err(Error::Config("learning rates must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// One optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Loss on this step's clip before the update.
    pub loss: f64,
    pub psnr: f64,
    /// Mean over the pool of each clip's latest loss; defined once every
    /// clip has been visited.
    pub smoothed_loss: Option<f64>,
    pub smoothed_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub steps: Vec<StepRecord>,
}

impl LossCurve {
    /// `(step, smoothed loss, smoothed psnr)` once defined.
    pub fn smoothed(&self) -> Vec<(usize, f64, f64)> {
        self.steps
            .iter()
            .filter_map(|r| Some((r.step, r.smoothed_loss?, r.smoothed_psnr?)))
            .collect()
    }

    /// Running minimum of the smoothed loss.
    pub fn monotone(&self) -> Vec<(usize, f64)> {
        let mut best = f64::INFINITY;
        self.smoothed()
            .into_iter()
            .map(|(s, l, _)| {
                best = best.min(l);
                (s, best)
            })
            .collect()
    }

    pub fn initial_smoothed(&self) -> Option<f64> {
        self.smoothed().first().map(|r| r.1)
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed().last().map(|r| r.1)
    }

    /// CSV with header `step,loss,psnr` over the smoothed curve.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,psnr\n");
        for (step, loss, p) in self.smoothed() {
            writeln!(s, "{step},{loss:.10e},{p:.6}").unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: LossCurve,
}

/// Seed stream for training clips; held-out clips use a different one.
pub fn train_stream(seed: u64) -> u64 {
    SplitMix64::derive(seed, 0x7261_696e).next_u64()
}

pub fn heldout_stream(seed: u64) -> u64 {
    SplitMix64::derive(seed, 0x6865_6c64).next_u64()
}

pub fn train_toy(cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_toy_with(cfg, seed, |_| {})
}

/// Staged Adam training on a fixed pool of clips visited in order; the
/// model is initialized from `seed`.
pub fn train_toy_with(cfg: &TrainConfig, seed: u64, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::build(cfg.network.clone(), seed)?;
    let pool = toy_pool(&cfg.data, train_stream(seed), cfg.data.pool_size)?;
    let k = pool.len();
    let mut latest: Vec<Option<(f64, f64)>> = vec![None; k];
    let mut state = OptimState::new(&model.weights, cfg.stages.first().map_or(0.0, |s| s.lr));
    let mut curve = LossCurve::default();
    let mut step = 0;
    for stage in &cfg.stages {
        state.lr = stage.lr;
        for _ in 0..stage.iters {
            let sample = &pool[step % k];
            let (loss, grads, out) = loss_and_grads(&model, sample)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {loss}"),
                });
            }
            let p = psnr(&sample.rgb, &clamp_unit(&out))?;
            latest[step % k] = Some((loss, p));
            let (smoothed_loss, smoothed_psnr) = if latest.iter().all(|v| v.is_some()) {
                let n = k as f64;
                let l = latest.iter().map(|v| v.unwrap().0).sum::<f64>() / n;
                let q = latest.iter().map(|v| v.unwrap().1).sum::<f64>() / n;
                (Some(l), Some(q))
            } else {
                (None, None)
            };
            let rec = StepRecord {
                step,
                lr: stage.lr,
                loss,
                psnr: p,
                smoothed_loss,
                smoothed_psnr,
            };
            on_step(&rec);
            curve.steps.push(rec);
            adam_step(&mut model.weights, &grads, &mut state)?;
            if let Some((key, _)) = model.weights.iter().find(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Training {
                    step,
                    reason: format!("weight `{key}` became non-finite"),
                });
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Held-out comparison of the network against the replicated
/// initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub psnr_model: f64,
    pub psnr_init: f64,
}

impl EvalReport {
    pub fn gain_db(&self) -> f64 {
        self.psnr_model - self.psnr_init
    }
}

pub fn evaluate_toy(model: &Model, spec: &ToyDataSpec, seed: u64, clips: usize) -> Result<EvalReport> {
    let samples = toy_pool(spec, heldout_stream(seed), clips)?;
    let (mut pm, mut pi) = (0.0, 0.0);
    for s in &samples {
        let out = clamp_unit(&model.forward(&s.init)?);
        pm += psnr(&s.rgb, &out)?;
        pi += psnr(&s.rgb, &s.init.replicate_channels(3))?;
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        psnr_model: pm / n,
        psnr_init: pi / n,
    })
}

/// Flattened view of a weight map, in key order.
pub fn flatten(weights: &WeightMap) -> Vec<f64> {
    weights.values().flat_map(|t| t.data.iter().copied()).collect()
}

pub fn unflatten(weights: &mut WeightMap, flat: &[f64]) {
    let mut off = 0;
    for t in weights.values_mut() {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Offsets of each key's block inside [`flatten`]'s output.
pub fn flat_offsets(weights: &WeightMap) -> BTreeMap<String, (usize, usize)> {
    let mut off = 0;
    weights
        .iter()
        .map(|(k, t)| {
            let r = (off, off + t.len());
            off += t.len();
            (k.clone(), r)
        })
        .collect()
}

/// Network input geometry for a config.
pub fn input_geom(cfg: &NetworkConfig) -> Geom {
    Geom::new(cfg.frames, cfg.height, cfg.width, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::Tensor;

    fn one(key: &str, v: f64) -> (WeightMap, GradMap) {
        let mut w = WeightMap::new();
        w.insert(key.into(), Tensor::new(&[1], vec![v]).unwrap());
        let mut g = GradMap::new();
        g.insert(key.into(), vec![1.0]);
        (w, g)
    }

    #[test]
    fn adam_first_step() {
        let (mut w, g) = one("w", 0.0);
        let mut st = OptimState::new(&w, 0.1);
        adam_step(&mut w, &g, &mut st).unwrap();
        let want = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((w["w"].data[0] - want).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let (mut w, mut g) = one("w", 0.7);
        g.get_mut("w").unwrap()[0] = 0.0;
        let mut st = OptimState::new(&w, 0.1);
        for _ in 0..3 {
            adam_step(&mut w, &g, &mut st).unwrap();
        }
        assert_eq!(w["w"].data[0], 0.7);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn adam_key_mismatch() {
        let (mut w, _) = one("w", 0.0);
        let (_, g) = one("other", 0.0);
        let mut st = OptimState::new(&w, 0.1);
        assert!(matches!(adam_step(&mut w, &g, &mut st), Err(Error::Contract(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let (mut w, _) = one("w", 0.3);
            let mut st = OptimState::new(&w, 0.05);
            let mut traj = Vec::new();
            for i in 0..20 {
                let g: GradMap = [("w".to_string(), vec![(i as f64 * 0.7).sin()])].into();
                adam_step(&mut w, &g, &mut st).unwrap();
                traj.push(w["w"].data[0].to_bits());
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn squares_are_in_range_and_move() {
        let spec = ToyDataSpec::default();
        let clip = moving_squares(&spec, &mut SplitMix64::new(5));
        assert_eq!(clip.dims(), &[32, 32, 3, 4]);
        assert!(clip.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let f0: Vec<f64> = (0..32 * 32).map(|i| clip.at(i / 32, i % 32, 0, 0)).collect();
        let f3: Vec<f64> = (0..32 * 32).map(|i| clip.at(i / 32, i % 32, 0, 3)).collect();
        assert_ne!(f0, f3);
    }

    #[test]
    fn pool_is_deterministic() {
        let spec = ToyDataSpec {
            height: 8,
            width: 8,
            ..ToyDataSpec::default()
        };
        let a = toy_pool(&spec, 3, 3).unwrap();
        let b = toy_pool(&spec, 3, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rgb, y.rgb);
            assert_eq!(x.init, y.init);
        }
        assert_ne!(a[0].rgb, a[1].rgb);
    }

    fn tiny_cfg(lr: f64, iters: usize) -> TrainConfig {
        let data = ToyDataSpec {
            height: 8,
            width: 8,
            frames: 2,
            pool_size: 2,
            ..ToyDataSpec::default()
        };
        let mut cfg = TrainConfig::default_for(Variant::T, data);
        cfg.network.blocks = [1, 1, 1, 1];
        cfg.stages = vec![Stage { lr, iters }];
        cfg
    }

    #[test]
    fn zero_learning_rate_gives_constant_curve() {
        let out = train_toy(&tiny_cfg(0.0, 6), 1).unwrap();
        let s = out.curve.smoothed();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|r| r.1 == s[0].1));
        assert_eq!(out.model, Model::build(tiny_cfg(0.0, 1).network, 1).unwrap());
    }

    #[test]
    fn same_seed_same_curve() {
        let a = train_toy(&tiny_cfg(1e-3, 4), 9).unwrap();
        let b = train_toy(&tiny_cfg(1e-3, 4), 9).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        assert!(a.curve.to_csv().starts_with("step,loss,psnr\n1,"));
    }

    #[test]
    fn diverging_run_names_the_step() {
        let cfg = tiny_cfg(1e-3, 3);
        let mut model = Model::build(cfg.network.clone(), 2).unwrap();
        model.weights.get_mut("head.conv3.bias").unwrap().data[0] = f64::INFINITY;
        let s = toy_sample(&cfg.data, 1, 0).unwrap();
        assert!(loss_and_grads(&model, &s).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let m = Model::build(tiny_cfg(0.0, 1).network, 4).unwrap();
        let flat = flatten(&m.weights);
        let mut w = m.weights.clone();
        w.values_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        unflatten(&mut w, &flat);
        assert_eq!(w, m.weights);
        let offs = flat_offsets(&m.weights);
        let (a, b) = offs["head.conv3.bias"];
        assert_eq!(&flat[a..b], &m.weights["head.conv3.bias"].data[..]);
    }
}
