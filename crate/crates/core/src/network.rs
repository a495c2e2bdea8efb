//! U-shaped reconstruction network: shallow depthwise-separable stem, three
//! encoder stages of residual-mamba blocks with 2×2 max-pooling, a
//! bottleneck, three residual-convolution decoder stages with skip
//! addition, and a three-layer convolutional color head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Geom, Kernel3, Tape, Var};
use crate::blocks::{residual_mamba_block, BlockConfig, D_CONV, D_STATE, EXPAND, MLP_RATIO, BRANCHES};
use crate::cube::VideoCube;
use crate::error::{Error, Result};
use crate::feature::Feature;
use crate::rng::SplitMix64;
use crate::ssm::scan_macs;
use crate::weights::{
    init_weights, read_weights, validate_weights, write_weights, Binder, Init, ParamSpec, WeightMap,
};

pub const DEFAULT_BLOCKS: [usize; 4] = [2, 4, 4, 6];
pub const OUTPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    T,
    S,
    B,
}

impl Variant {
    pub fn base_channels(self) -> usize {
        match self {
            Variant::T => 8,
            Variant::S => 10,
            Variant::B => 16,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::T => "t",
            Variant::S => "s",
            Variant::B => "b",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" => Ok(Variant::T),
            "s" => Ok(Variant::S),
            "b" => Ok(Variant::B),
            _ => Err(Error::Config(format!("unknown variant `{s}`, expected t, s or b"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub base_channels: usize,
    /// Blocks per encoder stage 1–3, then the bottleneck.
    pub blocks: [usize; 4],
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub mlp_ratio: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl NetworkConfig {
    pub fn new(variant: Variant, height: usize, width: usize, frames: usize) -> Self {
        Self {
            variant,
            base_channels: variant.base_channels(),
            blocks: DEFAULT_BLOCKS,
            d_state: D_STATE,
            expand: EXPAND,
            d_conv: D_CONV,
            mlp_ratio: MLP_RATIO,
            frames,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_spatial(self.height, self.width)?;
        if self.frames == 0 {
            return Err(Error::Config("frame count must be ≥ 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base channel count must be ≥ 1".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config(format!("every stage needs ≥ 1 block, got {:?}", self.blocks)));
        }
        self.block(1, 1).validate()
    }

    fn block(&self, input_dim: usize, output_dim: usize) -> BlockConfig {
        BlockConfig {
            input_dim,
            output_dim,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Width of encoder stage `i ∈ 1..=3` before its channel doubling.
    pub fn stage_width(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Block layout as `(key prefix, config)` in evaluation order, grouped
    /// by stage.
    pub fn block_plan(&self) -> Vec<(String, BlockConfig)> {
        let mut plan = Vec::new();
        for i in 1..=3 {
            let c = self.stage_width(i);
            let n = self.blocks[i - 1];
            for k in 0..n {
                let out = if k + 1 == n { 2 * c } else { c };
                plan.push((format!("enc{i}.block{k}."), self.block(c, out)));
            }
        }
        let c = 8 * self.base_channels;
        for k in 0..self.blocks[3] {
            plan.push((format!("bottleneck.block{k}."), self.block(c, c)));
        }
        plan
    }

    /// Width entering decoder stage `i ∈ 1..=3`.
    pub fn decoder_width(&self, i: usize) -> usize {
        (8 * self.base_channels) >> (i - 1)
    }

    /// Every learnable array, in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.base_channels;
        let mut specs = vec![
            ParamSpec::new("stem.dwconv.depthwise.weight", &[3, 3, 3, 1], Init::Normal),
            ParamSpec::new("stem.dwconv.depthwise.bias", &[1], Init::Zeros),
            ParamSpec::new("stem.dwconv.pointwise.weight", &[c, 1], Init::Normal),
            ParamSpec::new("stem.dwconv.pointwise.bias", &[c], Init::Zeros),
        ];
        for (prefix, cfg) in self.block_plan() {
            specs.extend(cfg.param_specs(&prefix));
        }
        for i in 1..=3 {
            let w = self.decoder_width(i);
            let p = |k: &str| format!("dec{i}.{k}");
            specs.push(ParamSpec::new(p("dwconv.depthwise.weight"), &[3, 3, 3, w], Init::Normal));
            specs.push(ParamSpec::new(p("dwconv.depthwise.bias"), &[w], Init::Zeros));
            specs.push(ParamSpec::new(p("dwconv.pointwise.weight"), &[w, w], Init::Normal));
            specs.push(ParamSpec::new(p("dwconv.pointwise.bias"), &[w], Init::Zeros));
            specs.push(ParamSpec::new(p("up.weight"), &[w / 2, w], Init::Normal));
            specs.push(ParamSpec::new(p("up.bias"), &[w / 2], Init::Zeros));
        }
        let head = [
            ("conv1", [3, 3, 3, c, c]),
            ("conv2", [3, 3, 3, c, c]),
            ("conv3", [1, 1, 1, c, OUTPUT_CHANNELS]),
        ];
        for (name, shape) in head {
            specs.push(ParamSpec::new(format!("head.{name}.weight"), &shape, Init::Normal));
            specs.push(ParamSpec::new(format!("head.{name}.bias"), &[shape[4]], Init::Zeros));
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.numel()).sum()
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(Error::Config(format!(
            "spatial dims {h}×{w} must be positive multiples of 8 (three 2× poolings)"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub weights: WeightMap,
}

/// Shape of each named stage output, recorded during a forward pass.
pub type Trace = Vec<(String, Geom)>;

/// Fails with a numeric error naming `layer` if `v` holds a NaN or ∞.
fn guard(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    match tape.value(v).iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "non-finite activation {} at index {i} after layer `{layer}`",
            tape.value(v)[i]
        ))),
        None => Ok(()),
    }
}

fn dwsep(tape: &mut Tape, bind: &mut Binder, prefix: &str, x: Var, geom: Geom) -> Result<Var> {
    let dw = bind.var(tape, &format!("{prefix}depthwise.weight"))?;
    let db = bind.var(tape, &format!("{prefix}depthwise.bias"))?;
    let pw = bind.var(tape, &format!("{prefix}pointwise.weight"))?;
    let pb = bind.var(tape, &format!("{prefix}pointwise.bias"))?;
    let h = tape.dwconv3d(x, geom, dw, Some(db), Kernel3::CUBE3);
    Ok(tape.linear(h, pw, Some(pb)))
}

impl Model {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let weights = init_weights(&config.param_specs(), &mut rng);
        Ok(Self { config, weights })
    }

    /// Wraps existing weights after checking them against `config`.
    pub fn from_weights(config: NetworkConfig, weights: WeightMap) -> Result<Self> {
        config.validate()?;
        validate_weights(&weights, &config.param_specs())?;
        Ok(Self { config, weights })
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(|t| t.len()).sum()
    }

    /// Records the forward pass of a `[T, H, W, 1]` input onto `tape`.
    pub fn record(&self, tape: &mut Tape, bind: &mut Binder, x: Var, geom: Geom, mut trace: Option<&mut Trace>) -> Result<Var> {
        let cfg = &self.config;
        check_spatial(geom.h, geom.w)?;
        if geom.t != cfg.frames || geom.c != 1 {
            return Err(Error::Shape(format!(
                "network input must be H×W×1×{}, got {}×{}×{}×{}",
                cfg.frames, geom.h, geom.w, geom.c, geom.t
            )));
        }
        let mut note = |name: &str, g: Geom| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name.to_string(), g));
            }
        };

        let c = cfg.base_channels;
        let mut x = dwsep(tape, bind, "stem.dwconv.", x, geom)?;
        let mut g = geom.with_channels(c);
        guard(tape, x, "stem")?;
        note("stem", g);

        let plan = cfg.block_plan();
        let mut next = 0;
        let mut skips = Vec::new();
        for i in 1..=3 {
            for _ in 0..cfg.blocks[i - 1] {
                let (prefix, bc) = &plan[next];
                next += 1;
                x = residual_mamba_block(tape, bind, prefix, x, g, bc)?;
                g = g.with_channels(bc.output_dim);
                guard(tape, x, prefix.trim_end_matches('.'))?;
            }
            x = tape.maxpool2(x, g);
            g = Geom::new(g.t, g.h / 2, g.w / 2, g.c);
            note(&format!("enc{i}"), g);
            skips.push((x, g));
        }
        for (prefix, bc) in &plan[next..] {
            x = residual_mamba_block(tape, bind, prefix, x, g, bc)?;
            guard(tape, x, prefix.trim_end_matches('.'))?;
        }
        note("bottleneck", g);

        for i in 1..=3 {
            let (skip, sg) = skips[3 - i];
            if sg != g {
                return Err(Error::Shape(format!("skip at dec{i}: encoder {sg:?} vs decoder {g:?}")));
            }
            let s = tape.add(x, skip);
            let d = dwsep(tape, bind, &format!("dec{i}.dwconv."), s, g)?;
            let r = tape.add(s, d);
            let a = tape.gelu(r);
            let u = tape.upsample2(a, g);
            let uw = bind.var(tape, &format!("dec{i}.up.weight"))?;
            let ub = bind.var(tape, &format!("dec{i}.up.bias"))?;
            x = tape.linear(u, uw, Some(ub));
            g = Geom::new(g.t, g.h * 2, g.w * 2, g.c / 2);
            guard(tape, x, &format!("dec{i}"))?;
            note(&format!("dec{i}"), g);
        }

        let convs = [("conv1", Kernel3::CUBE3, c), ("conv2", Kernel3::CUBE3, c), ("conv3", Kernel3::POINT, OUTPUT_CHANNELS)];
        for (k, (name, kernel, out)) in convs.into_iter().enumerate() {
            let w = bind.var(tape, &format!("head.{name}.weight"))?;
            let b = bind.var(tape, &format!("head.{name}.bias"))?;
            x = tape.conv3d(x, g, w, Some(b), kernel);
            g = g.with_channels(out);
            if k < 2 {
                x = tape.gelu(x);
            }
            guard(tape, x, &format!("head.{name}"))?;
        }
        note("head", g);
        Ok(x)
    }

    /// Reconstructs `H × W × 3 × T` color video from an `H × W × 1 × T`
    /// initialization.
    pub fn forward(&self, input: &VideoCube) -> Result<VideoCube> {
        Ok(self.forward_traced(input)?.0)
    }

    pub fn forward_traced(&self, input: &VideoCube) -> Result<(VideoCube, Trace)> {
        let f = Feature::from_cube(input);
        let mut tape = Tape::new();
        let mut bind = Binder::new(&self.weights);
        let x = tape.leaf(&f.geom.shape(), f.data);
        let mut trace = Trace::new();
        let y = self.record(&mut tape, &mut bind, x, f.geom, Some(&mut trace))?;
        let out = Feature::new(f.geom.with_channels(OUTPUT_CHANNELS), tape.value(y).to_vec())?;
        Ok((out.to_cube(), trace))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_weights(&self.weights, path)
    }

    /// Loads VWTS weights and checks every key and shape against `config`.
    pub fn load(path: impl AsRef<Path>, config: NetworkConfig) -> Result<Self> {
        Self::from_weights(config, read_weights(path)?)
    }
}

pub fn count_params(model: &Model) -> usize {
    model.param_count()
}

/// Floating-point operation counts, 2 per multiply-add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    /// Scan branches: Δ/B/C projections and the recurrence.
    pub scan: u64,
    pub other: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.scan + self.other
    }
}

/// Multiply-adds of one residual-mamba block over `l` tokens, split into
/// `(scan, other)`. Convolutions count every tap regardless of padding;
/// biases, normalizations (2 per element), scalings and gates count one
/// each; pointwise activations are free.
fn block_macs(cfg: &BlockConfig, l: u64) -> (u64, u64) {
    let c = cfg.input_dim as u64;
    let o = cfg.output_dim as u64;
    let e = cfg.scan_width() as u64;
    let h = cfg.hidden_width() as u64;
    let r = cfg.attention_width() as u64;
    let k = cfg.d_conv as u64;
    let branches = BRANCHES.len() as u64;
    let scan = branches * scan_macs(l as usize, e as usize, cfg.d_state);
    let mut other = 2 * l * c; // ln1
    other += 2 * (l * c * e + l * e); // in_x, in_z
    other += branches * (l * e * k + l * e + l * e + 2 * l * e + l * e); // conv, Δ bias, ln, gate
    other += l * e * c + l * c + l * c; // out, s1
    other += 2 * l * c + l * c * h + l * h + 27 * l * h + l * h + l * h * c + l * c + l * c; // ln2, edr, s2
    other += l * c * o + l * o; // proj
    other += 2 * l * o + l * o + (o * r + r) + (r * o + o) + l * o + 27 * l * o * o + l * o + l * o; // ln3, ca, s3
    (scan, other)
}

/// Whole-network operation count at `h × w × t`.
pub fn count_flops(config: &NetworkConfig, h: usize, w: usize, t: usize) -> FlopCount {
    let c = config.base_channels as u64;
    let tok = |s: u64| (h as u64 / s) * (w as u64 / s) * t as u64;
    let mut scan = 0;
    let mut other = 27 * tok(1) + tok(1) + tok(1) * c + tok(1) * c; // stem
    let mut stage = 0;
    let mut done = 0;
    for (_, bc) in config.block_plan() {
        let s = 1u64 << stage;
        let (a, b) = block_macs(&bc, tok(s));
        scan += a;
        other += b;
        done += 1;
        if stage < 3 && done == config.blocks[stage] {
            other += tok(s) * bc.output_dim as u64; // pooling comparisons
            stage += 1;
            done = 0;
        }
    }
    for i in 1..=3u64 {
        let wd = config.decoder_width(i as usize) as u64;
        let l = tok(8 >> (i - 1));
        other += l * wd + 27 * l * wd + l * wd + l * wd * wd + l * wd + l * wd; // skip, dwsep, residual
        let l2 = 4 * l;
        other += l2 * wd * (wd / 2) + l2 * (wd / 2); // channel halving
    }
    let l = tok(1);
    other += 2 * (27 * l * c * c + l * c) + l * c * OUTPUT_CHANNELS as u64 + l * OUTPUT_CHANNELS as u64;
    FlopCount {
        scan: 2 * scan,
        other: 2 * other,
    }
}

/// `8·H·W·T·C·N + 2·H·W·T·C·N²`.
pub fn attention_complexity(h: u64, w: u64, t: u64, c: u64, n: u64) -> u64 {
    let base = h * w * t * c * n;
    8 * base + 2 * base * n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> NetworkConfig {
        let mut c = NetworkConfig::new(variant, 8, 8, 2);
        c.blocks = [1, 1, 1, 1];
        c
    }

    #[test]
    fn attention_complexity_values() {
        assert_eq!(attention_complexity(8, 8, 2, 4, 16), 327_680);
        assert_eq!(attention_complexity(8, 8, 4, 4, 16), 2 * 327_680);
        assert_eq!(attention_complexity(8, 8, 2, 16, 16), 1_310_720);
    }

    #[test]
    fn variant_parse() {
        assert_eq!("B".parse::<Variant>().unwrap(), Variant::B);
        assert!("x".parse::<Variant>().is_err());
        assert_eq!(Variant::S.to_string(), "s");
    }

    #[test]
    fn indivisible_dims_are_config_errors() {
        assert!(matches!(NetworkConfig::new(Variant::T, 12, 16, 2).validate(), Err(Error::Config(_))));
        assert!(matches!(Model::build(NetworkConfig::new(Variant::T, 16, 20, 2), 1), Err(Error::Config(_))));
    }

    #[test]
    fn shape_ladder() {
        let cfg = tiny(Variant::T);
        let m = Model::build(cfg.clone(), 3).unwrap();
        let x = VideoCube::filled(&[16, 8, 1, 2], 0.5);
        let (y, trace) = m.forward_traced(&x).unwrap();
        assert_eq!(y.dims(), &[16, 8, 3, 2]);
        let c = cfg.base_channels;
        let want = [
            ("stem", Geom::new(2, 16, 8, c)),
            ("enc1", Geom::new(2, 8, 4, 2 * c)),
            ("enc2", Geom::new(2, 4, 2, 4 * c)),
            ("enc3", Geom::new(2, 2, 1, 8 * c)),
            ("bottleneck", Geom::new(2, 2, 1, 8 * c)),
            ("dec1", Geom::new(2, 4, 2, 4 * c)),
            ("dec2", Geom::new(2, 8, 4, 2 * c)),
            ("dec3", Geom::new(2, 16, 8, c)),
            ("head", Geom::new(2, 16, 8, 3)),
        ];
        assert_eq!(trace.len(), want.len());
        for ((n, g), (wn, wg)) in trace.iter().zip(want) {
            assert_eq!((n.as_str(), *g), (wn, wg));
        }
    }

    #[test]
    fn deepest_feature_for_b() {
        let m = Model::build(tiny(Variant::B), 1).unwrap();
        let (_, trace) = m.forward_traced(&VideoCube::zeros(&[8, 8, 1, 2])).unwrap();
        assert_eq!(trace[4].1, Geom::new(2, 1, 1, 128));
    }

    #[test]
    fn zero_everything_gives_zero() {
        let mut m = Model::build(tiny(Variant::T), 1).unwrap();
        m.weights.values_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let y = m.forward(&VideoCube::zeros(&[8, 8, 1, 2])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::build(tiny(Variant::S), 42).unwrap();
        let b = Model::build(tiny(Variant::S), 42).unwrap();
        assert_eq!(a, b);
        let c = Model::build(tiny(Variant::S), 43).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn nan_names_the_layer() {
        let mut m = Model::build(tiny(Variant::T), 1).unwrap();
        m.weights.get_mut("dec2.up.bias").unwrap().data[0] = f64::NAN;
        let err = m.forward(&VideoCube::filled(&[8, 8, 1, 2], 0.3)).unwrap_err();
        assert!(matches!(&err, Error::Numeric(msg) if msg.contains("dec2")), "{err}");
    }

    #[test]
    fn wrong_frame_count_is_shape_error() {
        let m = Model::build(tiny(Variant::T), 1).unwrap();
        assert!(matches!(m.forward(&VideoCube::zeros(&[8, 8, 1, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn param_count_matches_specs() {
        let cfg = NetworkConfig::new(Variant::T, 64, 64, 4);
        let m = Model::build(cfg.clone(), 0).unwrap();
        assert_eq!(count_params(&m), cfg.param_count());
    }

    #[test]
    fn flops_linear_in_frames() {
        let cfg = NetworkConfig::new(Variant::T, 32, 32, 4);
        let a = count_flops(&cfg, 32, 32, 4);
        let b = count_flops(&cfg, 32, 32, 8);
        assert_eq!(b.scan, 2 * a.scan);
        assert!(b.total() as f64 <= 2.05 * a.total() as f64);
    }
}
