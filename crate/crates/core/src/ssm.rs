//! Diagonal selective state-space scans.
//!
//! Per channel `c` and scan step `k`:
//!
//! ```text
//! Δ_k[c] = softplus(w_delta[c]·x_k + b_delta[c])
//! B_k    = w_b·x_k,   C_k = w_c·x_k                  (both length N)
//! Ā      = exp(Δ_k[c]·A[c,n])
//! B̄      = (exp(Δ_k[c]·A[c,n]) − 1) / A[c,n] · B_k[n]
//! h_k    = Ā·h_{k−1} + B̄·x_k[c],   h_0 = 0
//! y_k[c] = Σ_n C_k[n]·h_k[c,n]
//! ```
//!
//! with `A = −exp(a_log)`. There is no skip term. Sequences are row-major
//! `L × ĉ` slices.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Below this `|A|` the ZOH input gain uses its `a → 0` limit `Δ·b`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Largest `L·ĉ·N` the dense oracle accepts.
pub const ORACLE_MAX_STATE_STEPS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
}

impl ScanDirection {
    /// Sequence position visited at scan step `k`.
    #[inline]
    pub fn position(self, k: usize, len: usize) -> usize {
        match self {
            ScanDirection::Forward => k,
            ScanDirection::Backward => len - 1 - k,
        }
    }
}

/// Zero-order-hold discretization of one diagonal state entry.
///
/// Returns `(ā, b̄)` with `ā = exp(Δa)` and `b̄ = (exp(Δa) − 1)/a · b`.
pub fn discretize(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let abar = (delta * a).exp();
    (abar, zoh_gain(a, delta) * b)
}

/// `(exp(Δa) − 1)/a`, switching to `Δ` as `a → 0`.
#[inline]
pub(crate) fn zoh_gain(a: f64, delta: f64) -> f64 {
    if a.abs() < ZOH_LIMIT {
        delta
    } else {
        (delta * a).exp_m1() / a
    }
}

/// `(ā, gain)` from a single `expm1`; `ā = 1 + expm1(Δa)` carries an
/// absolute error below one ulp of 1.
#[inline]
fn zoh_terms(a: f64, delta: f64) -> (f64, f64, f64) {
    let em1 = (delta * a).exp_m1();
    let gain = if a.abs() < ZOH_LIMIT { delta } else { em1 / a };
    (1.0 + em1, gain, em1)
}

/// Partial derivatives of [`zoh_gain`] with respect to `Δ` and `a`.
///
/// `∂/∂a = Δ²·(z·eᶻ − eᶻ + 1)/z²` with `z = Δa`; the quotient cancels badly
/// for small `z`, where its series `½ + z/3 + z²/8 + z³/30` is used.
#[inline]
fn zoh_gain_grads(a: f64, delta: f64, abar: f64, em1: f64) -> (f64, f64) {
    let z = delta * a;
    if a.abs() < ZOH_LIMIT {
        (1.0, 0.5 * delta * delta)
    } else if z.abs() < 1e-4 {
        (abar, delta * delta * (0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0))))
    } else {
        (abar, (z * abar - em1) / (a * a))
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub channels: usize,
    pub state_size: usize,
    /// `ĉ × N`; `A = −exp(a_log)`.
    pub a_log: Vec<f64>,
    /// `ĉ × ĉ`, row `c` produces `Δ[c]`.
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
    /// `N × ĉ`.
    pub w_b: Vec<f64>,
    /// `N × ĉ`.
    pub w_c: Vec<f64>,
}

impl SsmParams {
    /// Standard initialization: `a_log[c, n] = ln(n + 1)`, projection weights
    /// from a truncated normal (σ = 0.02), and `b_delta` chosen so that
    /// `softplus(b_delta)` is log-uniform in `[1e-3, 1e-1]`.
    pub fn init(channels: usize, state_size: usize, rng: &mut SplitMix64) -> Self {
        let a_log = a_log_init(channels, state_size);
        let w_delta = (0..channels * channels).map(|_| rng.truncated_normal(0.02)).collect();
        let b_delta = delta_bias_init(channels, rng);
        let w_b = (0..state_size * channels).map(|_| rng.truncated_normal(0.02)).collect();
        let w_c = (0..state_size * channels).map(|_| rng.truncated_normal(0.02)).collect();
        Self {
            channels,
            state_size,
            a_log,
            w_delta,
            b_delta,
            w_b,
            w_c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, n) = (self.channels, self.state_size);
        if c == 0 || n == 0 {
            return Err(Error::Shape(format!("SSM needs ĉ ≥ 1 and N ≥ 1, got {c}, {n}")));
        }
        let checks = [
            ("a_log", self.a_log.len(), c * n),
            ("w_delta", self.w_delta.len(), c * c),
            ("b_delta", self.b_delta.len(), c),
            ("w_b", self.w_b.len(), n * c),
            ("w_c", self.w_c.len(), n * c),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        Ok(())
    }

    /// Continuous-time diagonal `A`, all entries negative.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }

    fn seq_len(&self, seq: &[f64]) -> Result<usize> {
        self.validate()?;
        if seq.is_empty() || !seq.len().is_multiple_of(self.channels) {
            return Err(Error::Shape(format!(
                "sequence of {} values is not a non-empty L×{} array",
                seq.len(),
                self.channels
            )));
        }
        Ok(seq.len() / self.channels)
    }

    /// Input-dependent `(Δ, B, C)` for every position, laid out `L × ĉ`,
    /// `L × N`, `L × N`.
    pub fn project(&self, seq: &[f64]) -> Result<Projections> {
        let len = self.seq_len(seq)?;
        let (c, n) = (self.channels, self.state_size);
        let mut delta = vec![0.0; len * c];
        let mut b = vec![0.0; len * n];
        let mut cm = vec![0.0; len * n];
        for l in 0..len {
            let x = &seq[l * c..(l + 1) * c];
            for o in 0..c {
                let z = dot(&self.w_delta[o * c..(o + 1) * c], x) + self.b_delta[o];
                delta[l * c + o] = softplus(z);
            }
            for s in 0..n {
                b[l * n + s] = dot(&self.w_b[s * c..(s + 1) * c], x);
                cm[l * n + s] = dot(&self.w_c[s * c..(s + 1) * c], x);
            }
        }
        Ok(Projections { delta, b, c: cm })
    }
}

pub(crate) fn a_log_init(channels: usize, state_size: usize) -> Vec<f64> {
    (0..channels)
        .flat_map(|_| (0..state_size).map(|s| ((s + 1) as f64).ln()))
        .collect()
}

pub(crate) fn delta_bias_init(channels: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    (0..channels)
        .map(|_| softplus_inverse(rng.uniform_range(lo, hi).exp()))
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Saved forward quantities for [`scan_recurrence_backward`].
#[derive(Debug, Clone)]
pub struct ScanTrace {
    /// `L × ĉ × N` states indexed by scan step.
    pub states: Vec<f64>,
    /// `expm1(Δa)` per scan step and state entry, same layout.
    pub decay_m1: Vec<f64>,
}

/// Result of [`scan_recurrence`].
#[derive(Debug, Clone)]
pub struct ScanOutput {
    /// `L × ĉ`, in sequence (not scan) order.
    pub y: Vec<f64>,
    /// `ĉ × N` state after the last scan step.
    pub h_end: Vec<f64>,
    /// Present when requested.
    pub trace: Option<ScanTrace>,
}

/// Dimensions of a recurrence evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanShape {
    pub len: usize,
    pub channels: usize,
    pub state_size: usize,
}

/// The recurrence with explicit per-position `Δ` (`L × ĉ`), `B`, `C`
/// (`L × N`) and continuous `A` (`ĉ × N`). `h0` (`ĉ × N`) seeds the state.
pub fn scan_recurrence(
    shape: ScanShape,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dir: ScanDirection,
    h0: Option<&[f64]>,
    keep_trace: bool,
) -> ScanOutput {
    let ScanShape {
        len,
        channels: ch,
        state_size: n,
    } = shape;
    debug_assert_eq!(x.len(), len * ch);
    debug_assert_eq!(delta.len(), len * ch);
    debug_assert_eq!(a.len(), ch * n);
    debug_assert_eq!(b.len(), len * n);
    debug_assert_eq!(c.len(), len * n);
    let mut h = match h0 {
        Some(h0) => h0.to_vec(),
        None => vec![0.0; ch * n],
    };
    let mut y = vec![0.0; len * ch];
    let mut trace = keep_trace.then(|| ScanTrace {
        states: vec![0.0; len * ch * n],
        decay_m1: vec![0.0; len * ch * n],
    });
    let mut em1 = vec![0.0; ch * n];
    for k in 0..len {
        let p = dir.position(k, len);
        let bk = &b[p * n..(p + 1) * n];
        let ck = &c[p * n..(p + 1) * n];
        for cc in 0..ch {
            let d = delta[p * ch + cc];
            let xv = x[p * ch + cc];
            let hc = &mut h[cc * n..(cc + 1) * n];
            let ac = &a[cc * n..(cc + 1) * n];
            let ec = &mut em1[cc * n..(cc + 1) * n];
            let mut acc = 0.0;
            for ((((hv, &av), ev), &bv), &cv) in hc.iter_mut().zip(ac).zip(ec).zip(bk).zip(ck) {
                let (abar, gain, m1) = zoh_terms(av, d);
                *hv = abar * *hv + gain * bv * xv;
                *ev = m1;
                acc += cv * *hv;
            }
            y[p * ch + cc] = acc;
        }
        if let Some(tr) = trace.as_mut() {
            tr.states[k * ch * n..(k + 1) * ch * n].copy_from_slice(&h);
            tr.decay_m1[k * ch * n..(k + 1) * ch * n].copy_from_slice(&em1);
        }
    }
    ScanOutput { y, h_end: h, trace }
}

/// Gradients of a recurrence evaluation, shapes mirroring the inputs.
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Backpropagation through time for [`scan_recurrence`] with `h0 = 0`,
/// using the trace of that forward evaluation.
pub fn scan_recurrence_backward(
    shape: ScanShape,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dir: ScanDirection,
    trace: &ScanTrace,
    grad_y: &[f64],
) -> ScanGrads {
    let ScanShape {
        len,
        channels: ch,
        state_size: n,
    } = shape;
    let cn = ch * n;
    let mut gx = vec![0.0; len * ch];
    let mut gdelta = vec![0.0; len * ch];
    let mut ga = vec![0.0; cn];
    let mut gb = vec![0.0; len * n];
    let mut gc = vec![0.0; len * n];
    let zeros = vec![0.0; cn];
    // dL/dh_k carried backwards through the scan
    let mut gh = vec![0.0; cn];
    for k in (0..len).rev() {
        let p = dir.position(k, len);
        let h_k = &trace.states[k * cn..(k + 1) * cn];
        let h_prev = if k == 0 { &zeros[..] } else { &trace.states[(k - 1) * cn..k * cn] };
        let em1_k = &trace.decay_m1[k * cn..(k + 1) * cn];
        let bk = &b[p * n..(p + 1) * n];
        let ck = &c[p * n..(p + 1) * n];
        let gbk = &mut gb[p * n..(p + 1) * n];
        let gck = &mut gc[p * n..(p + 1) * n];
        for cc in 0..ch {
            let d = delta[p * ch + cc];
            let xv = x[p * ch + cc];
            let gy = grad_y[p * ch + cc];
            let r = cc * n..(cc + 1) * n;
            let (ac, hk, hp, em) = (&a[r.clone()], &h_k[r.clone()], &h_prev[r.clone()], &em1_k[r.clone()]);
            let (ghc, gac) = (&mut gh[r.clone()], &mut ga[r]);
            let mut gd = 0.0;
            let mut gxv = 0.0;
            for s in 0..n {
                let av = ac[s];
                gck[s] += gy * hk[s];
                let g = ghc[s] + gy * ck[s];
                let m1 = em[s];
                let abar = 1.0 + m1;
                let gain = if av.abs() < ZOH_LIMIT { d } else { m1 / av };
                let (dgain_dd, dgain_da) = zoh_gain_grads(av, d, abar, m1);
                // h_k = ā·h_prev + gain·B·x
                let g_abar = g * hp[s];
                let g_gain = g * bk[s] * xv;
                gxv += g * gain * bk[s];
                gbk[s] += g * gain * xv;
                gd += g_abar * av * abar + g_gain * dgain_dd;
                gac[s] += g_abar * d * abar + g_gain * dgain_da;
                ghc[s] = g * abar;
            }
            gdelta[p * ch + cc] += gd;
            gx[p * ch + cc] += gxv;
        }
    }
    ScanGrads {
        x: gx,
        delta: gdelta,
        a: ga,
        b: gb,
        c: gc,
    }
}

/// Selective scan of an `L × ĉ` sequence.
pub fn selective_scan(seq: &[f64], params: &SsmParams, dir: ScanDirection) -> Result<Vec<f64>> {
    Ok(selective_scan_with_state(seq, params, dir, None)?.0)
}

/// Selective scan seeded with `h0`, also returning the final state, so that
/// a long sequence can be processed in consecutive pieces.
pub fn selective_scan_with_state(
    seq: &[f64],
    params: &SsmParams,
    dir: ScanDirection,
    h0: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = params.seq_len(seq)?;
    if let Some(h0) = h0 {
        if h0.len() != params.channels * params.state_size {
            return Err(Error::Shape(format!(
                "initial state has {} entries, expected {}",
                h0.len(),
                params.channels * params.state_size
            )));
        }
    }
    let proj = params.project(seq)?;
    let shape = ScanShape {
        len,
        channels: params.channels,
        state_size: params.state_size,
    };
    let out = scan_recurrence(shape, seq, &proj.delta, &params.a(), &proj.b, &proj.c, dir, h0, false);
    Ok((out.y, out.h_end))
}

/// Reference evaluation: one literal step at a time, no precomputed
/// projections, no shared helpers with the production path.
pub fn dense_oracle(seq: &[f64], params: &SsmParams, dir: ScanDirection) -> Result<Vec<f64>> {
    let len = params.seq_len(seq)?;
    let (ch, n) = (params.channels, params.state_size);
    if len * ch * n > ORACLE_MAX_STATE_STEPS {
        return Err(Error::Resource(format!(
            "oracle instance has {} state-steps, limit {ORACLE_MAX_STATE_STEPS}",
            len * ch * n
        )));
    }
    let order: Vec<usize> = match dir {
        ScanDirection::Forward => (0..len).collect(),
        ScanDirection::Backward => (0..len).rev().collect(),
    };
    let mut h = vec![vec![0.0f64; n]; ch];
    let mut y = vec![0.0; len * ch];
    for &p in &order {
        let x: Vec<f64> = seq[p * ch..(p + 1) * ch].to_vec();
        for c in 0..ch {
            let mut z = params.b_delta[c];
            for j in 0..ch {
                z += params.w_delta[c * ch + j] * x[j];
            }
            let delta = if z > 30.0 { z } else { (1.0 + z.exp()).ln() };
            let mut out = 0.0;
            for s in 0..n {
                let mut b_s = 0.0;
                let mut c_s = 0.0;
                for j in 0..ch {
                    b_s += params.w_b[s * ch + j] * x[j];
                    c_s += params.w_c[s * ch + j] * x[j];
                }
                let a = -params.a_log[c * n + s].exp();
                let abar = (delta * a).exp();
                let bbar = if a.abs() < ZOH_LIMIT {
                    delta * b_s
                } else {
                    (abar - 1.0) / a * b_s
                };
                h[c][s] = abar * h[c][s] + bbar * x[c];
                out += c_s * h[c][s];
            }
            y[p * ch + c] = out;
        }
    }
    Ok(y)
}

/// Multiply-adds of one selective scan: the three input projections plus
/// the discretization, state update and readout per state entry.
pub fn scan_macs(len: usize, channels: usize, state_size: usize) -> u64 {
    let (l, c, n) = (len as u64, channels as u64, state_size as u64);
    l * (c * c + 2 * n * c + 4 * c * n)
}
