use std::collections::BTreeMap;

use super::kernels::{self, Geom, Kernel3};
use crate::error::{Error, Result};
use crate::ssm::{self, ScanDirection, ScanShape};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => kernels::silu(x),
            Activation::Gelu => kernels::gelu(x),
            Activation::Sigmoid => kernels::sigmoid(x),
            Activation::Softplus => ssm::softplus(x),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => kernels::silu_grad(x),
            Activation::Gelu => kernels::gelu_grad(x),
            Activation::Sigmoid => {
                let s = kernels::sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => kernels::sigmoid(x),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var>, cin: usize, cout: usize },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleBy { x: Var, s: Var },
    Act { x: Var, kind: Activation },
    LayerNorm { x: Var, g: Var, b: Var, dim: usize, mean: Vec<f64>, rstd: Vec<f64> },
    CausalConv1d { x: Var, w: Var, b: Var, ch: usize, k: usize },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: Geom, cout: usize, kernel: Kernel3 },
    DwConv3d { x: Var, w: Var, b: Option<Var>, geom: Geom, kernel: Kernel3 },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var, geom: Geom },
    MeanTokens { x: Var, ch: usize },
    ChannelScale { x: Var, s: Var, ch: usize },
    Gather { x: Var, index: Vec<usize> },
    Scan {
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        shape: ScanShape,
        dir: ScanDirection,
        a: Vec<f64>,
        trace: ssm::ScanTrace,
    },
    Mse { x: Var, target: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// Values are computed eagerly as ops are recorded. [`Tape::backward`]
/// consumes the tape, so a graph can be differentiated once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: Vec<(String, Var)>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    names: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not influence it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    /// Gradients of every named parameter.
    pub fn named(&self) -> BTreeMap<String, Vec<f64>> {
        self.names
            .iter()
            .map(|(name, v)| (name.clone(), self.get(*v)))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Records an input (or constant) value.
    pub fn leaf(&mut self, shape: &[usize], value: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "leaf shape/value mismatch");
        self.push(shape.to_vec(), value, Op::Leaf)
    }

    /// Records a named learnable parameter.
    pub fn param(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Var {
        let v = self.leaf(shape, value);
        self.names.push((name.to_string(), v));
        v
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap()
    }

    fn rows_shape(&self, x: Var, cols: usize) -> Vec<usize> {
        let mut s = self.nodes[x.0].shape.clone();
        *s.last_mut().unwrap() = cols;
        s
    }

    /// Dense map over the last axis; `w` is `cout × cin`, `b` is `cout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let cin = self.last_dim(x);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        assert_eq!(ws[1], cin, "linear weight {ws:?} vs input width {cin}");
        let cout = ws[0];
        let out = kernels::linear_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            cin,
            cout,
        );
        let shape = self.rows_shape(x, cout);
        self.push(shape, out, Op::Linear { x, w, b, cin, cout })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.numel(a), self.numel(b), "add operands differ in size");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.numel(a), self.numel(b), "mul operands differ in size");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul(a, b))
    }

    /// `x · s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.numel(s), 1, "scale must be a scalar");
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::ScaleBy { x, s })
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Act { x, kind })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(x, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.act(x, Activation::Softplus)
    }

    /// Normalizes over the last axis with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let dim = self.last_dim(x);
        assert_eq!(self.numel(g), dim);
        assert_eq!(self.numel(b), dim);
        let (out, mean, rstd) =
            kernels::layer_norm_forward(self.value(x), self.value(g), self.value(b), dim);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LayerNorm { x, g, b, dim, mean, rstd })
    }

    /// Depthwise causal convolution along the first axis of an `L × C`
    /// sequence; `w` is `K × C`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ch = self.last_dim(x);
        let k = self.numel(w) / ch;
        assert_eq!(k * ch, self.numel(w));
        let out = kernels::causal_conv1d_forward(self.value(x), self.value(w), self.value(b), ch, k);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::CausalConv1d { x, w, b, ch, k })
    }

    /// Full 3-D convolution of a `[T, H, W, C]` map; `w` is
    /// `[kt, kh, kw, cin, cout]`.
    pub fn conv3d(&mut self, x: Var, geom: Geom, w: Var, b: Option<Var>, kernel: Kernel3) -> Var {
        assert_eq!(self.numel(x), geom.len());
        let cout = self.numel(w) / (kernel.taps() * geom.c);
        assert_eq!(cout * kernel.taps() * geom.c, self.numel(w));
        let out = kernels::conv3d_forward(self.value(x), geom, self.value(w), b.map(|b| self.value(b)), cout, kernel);
        self.push(geom.with_channels(cout).shape(), out, Op::Conv3d { x, w, b, geom, cout, kernel })
    }

    /// Per-channel 3-D convolution; `w` is `[kt, kh, kw, c]`.
    pub fn dwconv3d(&mut self, x: Var, geom: Geom, w: Var, b: Option<Var>, kernel: Kernel3) -> Var {
        assert_eq!(self.numel(x), geom.len());
        assert_eq!(self.numel(w), kernel.taps() * geom.c);
        let out = kernels::dwconv3d_forward(self.value(x), geom, self.value(w), b.map(|b| self.value(b)), kernel);
        self.push(geom.shape(), out, Op::DwConv3d { x, w, b, geom, kernel })
    }

    pub fn maxpool2(&mut self, x: Var, geom: Geom) -> Var {
        assert_eq!(self.numel(x), geom.len());
        let (out, argmax) = kernels::maxpool2_forward(self.value(x), geom);
        let shape = vec![geom.t, geom.h / 2, geom.w / 2, geom.c];
        self.push(shape, out, Op::MaxPool2 { x, argmax })
    }

    pub fn upsample2(&mut self, x: Var, geom: Geom) -> Var {
        assert_eq!(self.numel(x), geom.len());
        let out = kernels::upsample2_forward(self.value(x), geom);
        let shape = vec![geom.t, geom.h * 2, geom.w * 2, geom.c];
        self.push(shape, out, Op::Upsample2 { x, geom })
    }

    /// Mean over every axis but the last.
    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let ch = self.last_dim(x);
        let rows = self.numel(x) / ch;
        let mut out = kernels::sum_rows(self.value(x), ch);
        for v in &mut out {
            *v /= rows as f64;
        }
        self.push(vec![ch], out, Op::MeanTokens { x, ch })
    }

    /// Multiplies every row of `x` elementwise by the vector `s`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let ch = self.last_dim(x);
        assert_eq!(self.numel(s), ch);
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(ch)
            .flat_map(|row| row.iter().zip(sv).map(|(a, b)| a * b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::ChannelScale { x, s, ch })
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>());
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i]).collect();
        self.push(shape.to_vec(), out, Op::Gather { x, index })
    }

    /// Selective-scan recurrence over `x` (`L × ĉ`) with per-position
    /// `delta` (`L × ĉ`), `b`, `c` (`L × N`) and `A = −exp(a_log)`.
    pub fn scan(&mut self, x: Var, delta: Var, a_log: Var, b: Var, c: Var, dir: ScanDirection) -> Var {
        let ch = self.last_dim(x);
        let len = self.numel(x) / ch;
        let n = self.last_dim(b);
        let shape = ScanShape { len, channels: ch, state_size: n };
        assert_eq!(self.numel(delta), len * ch);
        assert_eq!(self.numel(a_log), ch * n);
        assert_eq!(self.numel(b), len * n);
        assert_eq!(self.numel(c), len * n);
        let a: Vec<f64> = self.value(a_log).iter().map(|v| -v.exp()).collect();
        let out = ssm::scan_recurrence(
            shape,
            self.value(x),
            self.value(delta),
            &a,
            self.value(b),
            self.value(c),
            dir,
            None,
            true,
        );
        let trace = out.trace.expect("trace requested");
        let out_shape = self.shape(x).to_vec();
        self.push(out_shape, out.y, Op::Scan { x, delta, a_log, b, c, shape, dir, a, trace })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Var {
        assert_eq!(self.numel(x), target.len());
        let n = target.len() as f64;
        let v = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(vec![1], vec![v], Op::Mse { x, target: target.to_vec() })
    }

    /// `Σ_i weights[i]·x[i]`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        assert_eq!(self.numel(x), weights.len());
        let v = self.value(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(vec![1], vec![v], Op::WeightedSum { x, weights: weights.to_vec() })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b, cin, cout } => {
                    acc(&mut grads, *x, kernels::linear_backward_input(&g, val(*w), *cin, *cout));
                    acc(&mut grads, *w, kernels::linear_backward_weight(&g, val(*x), *cin, *cout));
                    if let Some(b) = b {
                        acc(&mut grads, *b, kernels::sum_rows(&g, *cout));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::ScaleBy { x, s } => {
                    let sv = val(*s)[0];
                    let gs: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                    acc(&mut grads, *x, g.iter().map(|v| v * sv).collect());
                    acc(&mut grads, *s, vec![gs]);
                }
                Op::Act { x, kind } => {
                    let gx = g.iter().zip(val(*x)).map(|(gv, &xv)| gv * kind.derivative(xv)).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, g: gamma, b, dim, mean, rstd } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(&g, val(*x), val(*gamma), mean, rstd, *dim);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *b, db);
                }
                Op::CausalConv1d { x, w, b, ch, k } => {
                    let (dx, dw, db) = kernels::causal_conv1d_backward(&g, val(*x), val(*w), *ch, *k);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Conv3d { x, w, b, geom, cout, kernel } => {
                    let (dx, dw, db) = kernels::conv3d_backward(&g, val(*x), *geom, val(*w), *cout, *kernel);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::DwConv3d { x, w, b, geom, kernel } => {
                    let (dx, dw, db) = kernels::dwconv3d_backward(&g, val(*x), *geom, val(*w), *kernel);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![0.0; sizes[x.0]];
                    for (gv, &j) in g.iter().zip(argmax) {
                        dx[j] += gv;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample2 { x, geom } => {
                    acc(&mut grads, *x, kernels::upsample2_backward(&g, *geom));
                }
                Op::MeanTokens { x, ch } => {
                    let rows = sizes[x.0] / ch;
                    let inv = 1.0 / rows as f64;
                    let dx = (0..sizes[x.0]).map(|j| g[j % ch] * inv).collect();
                    acc(&mut grads, *x, dx);
                }
                Op::ChannelScale { x, s, ch } => {
                    let sv = val(*s);
                    let xv = val(*x);
                    let dx = g.iter().enumerate().map(|(j, gv)| gv * sv[j % ch]).collect();
                    let mut ds = vec![0.0; *ch];
                    for (j, gv) in g.iter().enumerate() {
                        ds[j % ch] += gv * xv[j];
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *s, ds);
                }
                Op::Gather { x, index } => {
                    let mut dx = vec![0.0; sizes[x.0]];
                    for (gv, &j) in g.iter().zip(index) {
                        dx[j] += gv;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Scan { x, delta, a_log, b, c, shape, dir, a, trace } => {
                    let sg = ssm::scan_recurrence_backward(
                        *shape,
                        val(*x),
                        val(*delta),
                        a,
                        val(*b),
                        val(*c),
                        *dir,
                        trace,
                        &g,
                    );
                    // A = −exp(a_log) ⇒ dA/da_log = A
                    let ga_log = sg.a.iter().zip(a).map(|(gv, av)| gv * av).collect();
                    acc(&mut grads, *x, sg.x);
                    acc(&mut grads, *delta, sg.delta);
                    acc(&mut grads, *a_log, ga_log);
                    acc(&mut grads, *b, sg.b);
                    acc(&mut grads, *c, sg.c);
                }
                Op::Mse { x, target } => {
                    let scale = 2.0 * g[0] / target.len() as f64;
                    let dx = val(*x).iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                    acc(&mut grads, *x, dx);
                }
                Op::WeightedSum { x, weights } => {
                    acc(&mut grads, *x, weights.iter().map(|w| w * g[0]).collect());
                }
            }
        }
        Ok(Gradients {
            grads,
            sizes,
            names: self.names,
        })
    }
}
