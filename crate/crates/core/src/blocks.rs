//! Residual-Mamba-Block and its parts: the three-branch spatio-temporal
//! scan mixer, the edge-detail feed-forward, and channel attention.
//!
//! Every function records onto a [`Tape`] and reads its parameters through a
//! [`Binder`] under a dotted key prefix, so the same code serves inference,
//! training, and gradient checks. Feature maps are channels-last
//! `[T, H, W, C]`.

use crate::autodiff::{Geom, Kernel3, Tape, Var};
use crate::error::{Error, Result};
use crate::feature::Feature;
use crate::rng::SplitMix64;
use crate::ssm::ScanDirection;
use crate::weights::{init_weights, Binder, Init, ParamSpec, WeightMap};

pub const D_STATE: usize = 16;
pub const D_CONV: usize = 4;
pub const EXPAND: usize = 2;
pub const MLP_RATIO: usize = 4;

/// Scan branches: name, token order, direction.
pub const BRANCHES: [(&str, Unfold, ScanDirection); 3] = [
    ("spatial_fwd", Unfold::FrameMajor, ScanDirection::Forward),
    ("spatial_bwd", Unfold::FrameMajor, ScanDirection::Backward),
    ("temporal", Unfold::PixelMajor, ScanDirection::Forward),
];

/// How a `[T, H, W, C]` map is flattened into a scan sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unfold {
    /// `t` outer, then row-major raster; the storage order.
    FrameMajor,
    /// Raster outer, `t` inner.
    PixelMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub mlp_ratio: usize,
}

impl BlockConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            d_state: D_STATE,
            d_conv: D_CONV,
            expand: EXPAND,
            mlp_ratio: MLP_RATIO,
        }
    }

    /// Scan channel width `ĉ = expand · input_dim`.
    pub fn scan_width(&self) -> usize {
        self.expand * self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.mlp_ratio * self.input_dim
    }

    pub fn attention_width(&self) -> usize {
        (self.output_dim / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
            ("expand", self.expand),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("block {name} must be ≥ 1")));
            }
        }
        Ok(())
    }

    /// Every learnable array of one block, in initialization order.
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let (c, o) = (self.input_dim, self.output_dim);
        let (e, n, k, h, r) = (self.scan_width(), self.d_state, self.d_conv, self.hidden_width(), self.attention_width());
        let mut specs = Vec::new();
        let mut add = |key: String, shape: &[usize], init| specs.push(ParamSpec::new(format!("{prefix}{key}"), shape, init));
        add("ln1.weight".into(), &[c], Init::Ones);
        add("ln1.bias".into(), &[c], Init::Zeros);
        add("stm.in_x.weight".into(), &[e, c], Init::Normal);
        add("stm.in_x.bias".into(), &[e], Init::Zeros);
        add("stm.in_z.weight".into(), &[e, c], Init::Normal);
        add("stm.in_z.bias".into(), &[e], Init::Zeros);
        for (b, _, _) in BRANCHES {
            add(format!("stm.{b}.conv.weight"), &[k, e], Init::Normal);
            add(format!("stm.{b}.conv.bias"), &[e], Init::Zeros);
            add(format!("stm.{b}.a_log"), &[e, n], Init::ALog);
            add(format!("stm.{b}.w_delta"), &[e, e], Init::Normal);
            add(format!("stm.{b}.b_delta"), &[e], Init::DeltaBias);
            add(format!("stm.{b}.w_b"), &[n, e], Init::Normal);
            add(format!("stm.{b}.w_c"), &[n, e], Init::Normal);
            add(format!("stm.{b}.norm.weight"), &[e], Init::Ones);
            add(format!("stm.{b}.norm.bias"), &[e], Init::Zeros);
        }
        add("stm.out.weight".into(), &[c, e], Init::Normal);
        add("stm.out.bias".into(), &[c], Init::Zeros);
        add("s1".into(), &[1], Init::Ones);
        add("ln2.weight".into(), &[c], Init::Ones);
        add("ln2.bias".into(), &[c], Init::Zeros);
        add("edr.fc1.weight".into(), &[h, c], Init::Normal);
        add("edr.fc1.bias".into(), &[h], Init::Zeros);
        add("edr.dw.weight".into(), &[3, 3, 3, h], Init::Normal);
        add("edr.dw.bias".into(), &[h], Init::Zeros);
        add("edr.fc2.weight".into(), &[c, h], Init::Normal);
        add("edr.fc2.bias".into(), &[c], Init::Zeros);
        add("s2".into(), &[1], Init::Ones);
        add("proj.weight".into(), &[o, c], Init::Normal);
        add("proj.bias".into(), &[o], Init::Zeros);
        add("ln3.weight".into(), &[o], Init::Ones);
        add("ln3.bias".into(), &[o], Init::Zeros);
        add("ca.fc1.weight".into(), &[r, o], Init::Normal);
        add("ca.fc1.bias".into(), &[r], Init::Zeros);
        add("ca.fc2.weight".into(), &[o, r], Init::Normal);
        add("ca.fc2.bias".into(), &[o], Init::Zeros);
        add("ca.fuse.weight".into(), &[3, 3, 3, o, o], Init::Normal);
        add("ca.fuse.bias".into(), &[o], Init::Zeros);
        add("s3".into(), &[1], Init::Ones);
        specs
    }
}

fn check_width(geom: Geom, want: usize, what: &str) -> Result<()> {
    if geom.c != want {
        return Err(Error::Shape(format!("{what} expects {want} channels, feature has {}", geom.c)));
    }
    Ok(())
}

/// `perm[q]` is the storage token visited at sequence position `q`.
pub fn unfold_order(geom: Geom, unfold: Unfold) -> Vec<usize> {
    let hw = geom.h * geom.w;
    match unfold {
        Unfold::FrameMajor => (0..geom.tokens()).collect(),
        Unfold::PixelMajor => (0..hw).flat_map(|p| (0..geom.t).map(move |t| t * hw + p)).collect(),
    }
}

fn token_gather(order: &[usize], ch: usize) -> Vec<usize> {
    order.iter().flat_map(|&src| (0..ch).map(move |c| src * ch + c)).collect()
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (q, &src) in order.iter().enumerate() {
        inv[src] = q;
    }
    inv
}

/// One scan branch on an already unfolded `L × ĉ` sequence: causal
/// depthwise conv, SiLU, selective scan, layer norm.
///
/// A backward branch convolves causally in its own scan direction.
fn scan_branch(tape: &mut Tape, bind: &mut Binder, prefix: &str, seq: Var, dir: ScanDirection) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    let (len, ch) = (shape[0], shape[1]);
    let p = |k: &str| format!("{prefix}{k}");
    let cw = bind.var(tape, &p("conv.weight"))?;
    let cb = bind.var(tape, &p("conv.bias"))?;
    let u = match dir {
        ScanDirection::Forward => tape.causal_conv1d(seq, cw, cb),
        ScanDirection::Backward => {
            let rev: Vec<usize> = (0..len).rev().collect();
            let idx = token_gather(&rev, ch);
            let r = tape.gather(seq, idx.clone(), &shape);
            let r = tape.causal_conv1d(r, cw, cb);
            tape.gather(r, idx, &shape)
        }
    };
    let u = tape.silu(u);
    let wd = bind.var(tape, &p("w_delta"))?;
    let bd = bind.var(tape, &p("b_delta"))?;
    let delta = tape.linear(u, wd, Some(bd));
    let delta = tape.softplus(delta);
    let wb = bind.var(tape, &p("w_b"))?;
    let wc = bind.var(tape, &p("w_c"))?;
    let b = tape.linear(u, wb, None);
    let c = tape.linear(u, wc, None);
    let a_log = bind.var(tape, &p("a_log"))?;
    let y = tape.scan(u, delta, a_log, b, c, dir);
    let g = bind.var(tape, &p("norm.weight"))?;
    let beta = bind.var(tape, &p("norm.bias"))?;
    Ok(tape.layer_norm(y, g, beta))
}

/// Three-branch spatio-temporal scan mixer; keys under `prefix`
/// (`in_x`, `in_z`, the branches, `out`). Preserves the feature shape.
pub fn stmamba(tape: &mut Tape, bind: &mut Binder, prefix: &str, x: Var, geom: Geom) -> Result<Var> {
    if tape.value(x).len() != geom.len() {
        return Err(Error::Shape(format!("stmamba input has {} values, geometry {geom:?}", tape.value(x).len())));
    }
    let p = |k: &str| format!("{prefix}{k}");
    let (wx, bx) = (bind.var(tape, &p("in_x.weight"))?, bind.var(tape, &p("in_x.bias"))?);
    let (wz, bz) = (bind.var(tape, &p("in_z.weight"))?, bind.var(tape, &p("in_z.bias"))?);
    let xs = tape.linear(x, wx, Some(bx));
    let xs = tape.silu(xs);
    let z = tape.linear(x, wz, Some(bz));
    let z = tape.silu(z);
    let e = *tape.shape(xs).last().unwrap();
    let seq_shape = [geom.tokens(), e];
    let mut mixed: Option<Var> = None;
    for (name, unfold, dir) in BRANCHES {
        let bp = format!("{prefix}{name}.");
        let y = match unfold {
            Unfold::FrameMajor => {
                let seq = tape.gather(xs, (0..geom.tokens() * e).collect(), &seq_shape);
                let y = scan_branch(tape, bind, &bp, seq, dir)?;
                tape.gather(y, (0..geom.tokens() * e).collect(), &geom.with_channels(e).shape())
            }
            Unfold::PixelMajor => {
                let order = unfold_order(geom, unfold);
                let seq = tape.gather(xs, token_gather(&order, e), &seq_shape);
                let y = scan_branch(tape, bind, &bp, seq, dir)?;
                tape.gather(y, token_gather(&inverse(&order), e), &geom.with_channels(e).shape())
            }
        };
        let gated = tape.mul(y, z);
        mixed = Some(match mixed {
            None => gated,
            Some(acc) => tape.add(acc, gated),
        });
    }
    let (wo, bo) = (bind.var(tape, &p("out.weight"))?, bind.var(tape, &p("out.bias"))?);
    Ok(tape.linear(mixed.unwrap(), wo, Some(bo)))
}

/// Edge-detail feed-forward: Linear ↑ → GELU → depthwise 3×3×3 → GELU →
/// Linear ↓. Keys `fc1`, `dw`, `fc2` under `prefix`.
pub fn edr(tape: &mut Tape, bind: &mut Binder, prefix: &str, x: Var, geom: Geom) -> Result<Var> {
    if tape.value(x).len() != geom.len() {
        return Err(Error::Shape(format!(
            "edr token count {} does not match H·W·T = {}",
            tape.value(x).len() / geom.c.max(1),
            geom.tokens()
        )));
    }
    let p = |k: &str| format!("{prefix}{k}");
    let (w1, b1) = (bind.var(tape, &p("fc1.weight"))?, bind.var(tape, &p("fc1.bias"))?);
    let h = tape.linear(x, w1, Some(b1));
    let h = tape.gelu(h);
    let hid = *tape.shape(h).last().unwrap();
    let (wd, bd) = (bind.var(tape, &p("dw.weight"))?, bind.var(tape, &p("dw.bias"))?);
    let h = tape.dwconv3d(h, geom.with_channels(hid), wd, Some(bd), Kernel3::CUBE3);
    let h = tape.gelu(h);
    let (w2, b2) = (bind.var(tape, &p("fc2.weight"))?, bind.var(tape, &p("fc2.bias"))?);
    Ok(tape.linear(h, w2, Some(b2)))
}

/// Channel attention: global mean → 1×1×1 bottleneck → sigmoid weights →
/// rescale → 3×3×3 fusion conv. Keys `fc1`, `fc2`, `fuse` under `prefix`.
///
/// Returns `(output, attention weights)`.
pub fn ca(tape: &mut Tape, bind: &mut Binder, prefix: &str, x: Var, geom: Geom) -> Result<(Var, Var)> {
    if tape.value(x).len() != geom.len() {
        return Err(Error::Shape(format!("ca input has {} values, geometry {geom:?}", tape.value(x).len())));
    }
    let p = |k: &str| format!("{prefix}{k}");
    let pooled = tape.mean_tokens(x);
    let (w1, b1) = (bind.var(tape, &p("fc1.weight"))?, bind.var(tape, &p("fc1.bias"))?);
    let a = tape.linear(pooled, w1, Some(b1));
    let a = tape.gelu(a);
    let (w2, b2) = (bind.var(tape, &p("fc2.weight"))?, bind.var(tape, &p("fc2.bias"))?);
    let a = tape.linear(a, w2, Some(b2));
    let weights = tape.sigmoid(a);
    let scaled = tape.channel_scale(x, weights);
    let (wf, bf) = (bind.var(tape, &p("fuse.weight"))?, bind.var(tape, &p("fuse.bias"))?);
    let out = tape.conv3d(scaled, geom, wf, Some(bf), Kernel3::CUBE3);
    Ok((out, weights))
}

fn layer_norm(tape: &mut Tape, bind: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let g = bind.var(tape, &format!("{prefix}weight"))?;
    let b = bind.var(tape, &format!("{prefix}bias"))?;
    Ok(tape.layer_norm(x, g, b))
}

/// `F1 = stmamba(LN F) + s1·F`, `F2 = proj(edr(LN F1) + s2·F1)`,
/// `out = ca(LN F2) + s3·F2`. Only `proj` changes the channel count.
pub fn residual_mamba_block(
    tape: &mut Tape,
    bind: &mut Binder,
    prefix: &str,
    x: Var,
    geom: Geom,
    cfg: &BlockConfig,
) -> Result<Var> {
    check_width(geom, cfg.input_dim, "residual-mamba block")?;
    let p = |k: &str| format!("{prefix}{k}");
    let s1 = bind.var(tape, &p("s1"))?;
    let s2 = bind.var(tape, &p("s2"))?;
    let s3 = bind.var(tape, &p("s3"))?;

    let n1 = layer_norm(tape, bind, &p("ln1."), x)?;
    let m = stmamba(tape, bind, &p("stm."), n1, geom)?;
    let r1 = tape.scale_by(x, s1);
    let f1 = tape.add(m, r1);

    let n2 = layer_norm(tape, bind, &p("ln2."), f1)?;
    let d = edr(tape, bind, &p("edr."), n2, geom)?;
    let r2 = tape.scale_by(f1, s2);
    let sum = tape.add(d, r2);
    let (pw, pb) = (bind.var(tape, &p("proj.weight"))?, bind.var(tape, &p("proj.bias"))?);
    let f2 = tape.linear(sum, pw, Some(pb));

    let og = geom.with_channels(cfg.output_dim);
    let n3 = layer_norm(tape, bind, &p("ln3."), f2)?;
    let (a, _) = ca(tape, bind, &p("ca."), n3, og)?;
    let r3 = tape.scale_by(f2, s3);
    Ok(tape.add(a, r3))
}

/// One block's configuration and weights (keys without a prefix), for
/// standalone evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub config: BlockConfig,
    pub weights: WeightMap,
}

impl BlockParams {
    pub fn init(config: BlockConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let weights = init_weights(&config.param_specs(""), rng);
        Ok(Self { config, weights })
    }

    /// All arrays zero except the scales, which are `scale`.
    pub fn zeros(config: BlockConfig, scale: f64) -> Result<Self> {
        config.validate()?;
        let weights = config
            .param_specs("")
            .into_iter()
            .map(|s| {
                let mut t = crate::weights::Tensor::zeros(&s.shape);
                if matches!(s.key.as_str(), "s1" | "s2" | "s3") {
                    t.data[0] = scale;
                }
                (s.key, t)
            })
            .collect();
        Ok(Self { config, weights })
    }

    /// Sets `proj` to the identity (requires `input_dim == output_dim`).
    pub fn set_identity_projection(&mut self) {
        let (c, o) = (self.config.input_dim, self.config.output_dim);
        let w = self.weights.get_mut("proj.weight").unwrap();
        w.data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..c.min(o) {
            w.data[i * c + i] = 1.0;
        }
        self.weights.get_mut("proj.bias").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(|t| t.len()).sum()
    }

    fn run<F>(&self, input: &Feature, f: F) -> Result<Feature>
    where
        F: FnOnce(&mut Tape, &mut Binder, Var, Geom) -> Result<(Var, Geom)>,
    {
        let mut tape = Tape::new();
        let mut bind = Binder::new(&self.weights);
        let x = tape.leaf(&input.geom.shape(), input.data.clone());
        let (y, g) = f(&mut tape, &mut bind, x, input.geom)?;
        Feature::new(g, tape.value(y).to_vec())
    }

    pub fn forward(&self, input: &Feature) -> Result<Feature> {
        let cfg = self.config;
        self.run(input, |t, b, x, g| {
            let y = residual_mamba_block(t, b, "", x, g, &cfg)?;
            Ok((y, g.with_channels(cfg.output_dim)))
        })
    }

    pub fn stmamba(&self, input: &Feature) -> Result<Feature> {
        check_width(input.geom, self.config.input_dim, "stmamba")?;
        self.run(input, |t, b, x, g| Ok((stmamba(t, b, "stm.", x, g)?, g)))
    }

    pub fn edr(&self, input: &Feature) -> Result<Feature> {
        check_width(input.geom, self.config.input_dim, "edr")?;
        self.run(input, |t, b, x, g| Ok((edr(t, b, "edr.", x, g)?, g)))
    }

    /// Channel attention at `output_dim` width; also returns the
    /// per-channel weights.
    pub fn ca(&self, input: &Feature) -> Result<(Feature, Vec<f64>)> {
        check_width(input.geom, self.config.output_dim, "ca")?;
        let mut weights = Vec::new();
        let out = self.run(input, |t, b, x, g| {
            let (y, w) = ca(t, b, "ca.", x, g)?;
            weights = t.value(w).to_vec();
            Ok((y, g))
        })?;
        Ok((out, weights))
    }
}
