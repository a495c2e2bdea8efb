use crate::error::{Error, Result};

/// Default central-difference step for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;
/// Floor for the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `f` at `point` with central
/// differences on every coordinate.
///
/// `f` returns the scalar value and its analytic gradient. Piecewise
/// operations (max-pool, sign) must be probed away from their kinks; the
/// checker does not detect ties.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, &all, step)
}

/// As [`grad_check`], restricted to `coords`.
pub fn grad_check_coords<F>(f: F, point: &[f64], coords: &[usize], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (v0, grad) = f(point)?;
    if !v0.is_finite() {
        return Err(Error::Numeric(format!("function value {v0} at the base point")));
    }
    if grad.len() != point.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for a {}-dimensional point",
            grad.len(),
            point.len()
        )));
    }
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = point.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let (fp, _) = f(&probe)?;
        probe[i] = orig - step;
        let (fm, _) = f(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value probing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = relative_error(grad[i], numeric);
        if err > worst.max_rel_error || i == coords[0] {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: grad[i],
                numeric,
            };
        }
    }
    Ok(worst)
}

/// Steps tried by [`grad_check_ladder`], largest first.
pub const FD_LADDER: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Multiple of `ε·|f|/h` treated as round-off in a central difference.
pub const FD_NOISE_FACTOR: f64 = 100.0;

/// Central difference along coordinate `i`, trying the steps of `ladder`
/// from largest to smallest.
///
/// A step is accepted once its estimate agrees with the next smaller step to
/// within that step's round-off floor `FD_NOISE_FACTOR·ε·|f|/h`. Steps that
/// are too large (truncation, a kink in between) disagree and are skipped;
/// the smallest step is the fallback.
pub fn fd_select<V>(value: &V, point: &[f64], i: usize, ladder: &[f64]) -> Result<f64>
where
    V: Fn(&[f64]) -> Result<f64>,
{
    if ladder.is_empty() || ladder.iter().any(|&h| h <= 0.0 || !h.is_finite()) {
        return Err(Error::Config(format!("finite-difference ladder must hold positive steps, got {ladder:?}")));
    }
    let f0 = value(point)?;
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("function value {f0} at the base point")));
    }
    let mut probe = point.to_vec();
    let mut central = |h: f64| -> Result<f64> {
        probe[i] = point[i] + h;
        let fp = value(&probe)?;
        probe[i] = point[i] - h;
        let fm = value(&probe)?;
        probe[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value probing coordinate {i}")));
        }
        Ok((fp - fm) / (2.0 * h))
    };
    let mut prev = central(ladder[0])?;
    for &h in &ladder[1..] {
        let next = central(h)?;
        let floor = FD_NOISE_FACTOR * f64::EPSILON * f0.abs() / h;
        if (prev - next).abs() <= floor {
            return Ok(prev);
        }
        prev = next;
    }
    Ok(prev)
}

/// Compares `analytic` against [`fd_select`] estimates of `value` on
/// `coords`.
pub fn grad_check_ladder<V>(value: V, analytic: &[f64], point: &[f64], coords: &[usize], ladder: &[f64]) -> Result<GradCheck>
where
    V: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (n, &i) in coords.iter().enumerate() {
        let numeric = fd_select(&value, point, i, ladder)?;
        let err = relative_error(analytic[i], numeric);
        if err > worst.max_rel_error || n == 0 {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(worst)
}
