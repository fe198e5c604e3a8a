//! Embedded Dormand–Prince 5(4) integrator with adaptive step control.
//!
//! Steps are shortened so that every requested output time is hit exactly;
//! the returned states are the integrator's own 5th-order solutions there.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10 }
    }
}

impl Tolerances {
    pub fn scaled(self, factor: f64) -> Self {
        Self { rtol: self.rtol * factor, atol: self.atol * factor }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolverFailure {
    StepUnderflow { t: f64, h: f64 },
    TooManySteps { t: f64, steps: usize },
    NonFinite { t: f64 },
}

impl std::fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverFailure::StepUnderflow { t, h } => write!(f, "step size underflow (h = {h:e}) at t = {t}"),
            SolverFailure::TooManySteps { t, steps } => write!(f, "gave up after {steps} steps at t = {t}"),
            SolverFailure::NonFinite { t } => write!(f, "non-finite state at t = {t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

// stiff corners of the clamped parameter box need a few 10^5 steps
const MAX_STEPS: usize = 5_000_000;

// Butcher tableau
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th minus 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy<const N: usize>(y: &[f64; N], terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += c * k[i];
        }
    }
    out
}

/// Integrates `dy/dt = f(t, y)` from `(t0, y0)` and returns the state at each
/// of `outputs` (ascending, all `>= t0`).
pub fn integrate<const N: usize, F>(
    f: F,
    t0: f64,
    y0: [f64; N],
    outputs: &[f64],
    tol: Tolerances,
) -> Result<(Vec<[f64; N]>, SolverStats), SolverFailure>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let mut stats = SolverStats::default();
    let mut out = Vec::with_capacity(outputs.len());
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    stats.rhs_evals += 1;
    let t_end = outputs.last().copied().unwrap_or(t0);
    let mut h = initial_step(&y, &k1, tol, t_end - t0);
    let mut steps = 0usize;
    let mut next = 0usize;
    while next < outputs.len() && outputs[next] <= t {
        out.push(y);
        next += 1;
    }
    while next < outputs.len() {
        let target = outputs[next];
        let mut step = h;
        let mut lands = false;
        if t + step >= target || t + 1.01 * step >= target {
            step = target - t;
            lands = true;
        }
        if step <= 1e-14 * t.abs().max(1.0) {
            return Err(SolverFailure::StepUnderflow { t, h: step });
        }
        steps += 1;
        if steps > MAX_STEPS {
            return Err(SolverFailure::TooManySteps { t, steps });
        }

        let k2 = f(t + C2 * step, &axpy(&y, &[(step * A21, &k1)]));
        let k3 = f(t + C3 * step, &axpy(&y, &[(step * A31, &k1), (step * A32, &k2)]));
        let k4 = f(t + C4 * step, &axpy(&y, &[(step * A41, &k1), (step * A42, &k2), (step * A43, &k3)]));
        let k5 = f(
            t + C5 * step,
            &axpy(&y, &[(step * A51, &k1), (step * A52, &k2), (step * A53, &k3), (step * A54, &k4)]),
        );
        let k6 = f(
            t + step,
            &axpy(
                &y,
                &[(step * A61, &k1), (step * A62, &k2), (step * A63, &k3), (step * A64, &k4), (step * A65, &k5)],
            ),
        );
        let y_new = axpy(
            &y,
            &[(step * A71, &k1), (step * A73, &k3), (step * A74, &k4), (step * A75, &k5), (step * A76, &k6)],
        );
        let k7 = f(t + step, &y_new);
        stats.rhs_evals += 6;

        let mut err = 0.0;
        for i in 0..N {
            let e = step * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / N as f64).sqrt();
        if !err.is_finite() {
            if y_new.iter().any(|v| !v.is_finite()) && step < 1e-10 {
                return Err(SolverFailure::NonFinite { t });
            }
            stats.rejected += 1;
            h = step * 0.2;
            continue;
        }

        if err <= 1.0 {
            stats.accepted += 1;
            t = if lands { target } else { t + step };
            y = y_new;
            k1 = k7;
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // a step shortened to land on an output says little about the next one
            h = if lands { h.max(step * fac) } else { step * fac };
            while next < outputs.len() && outputs[next] <= t {
                out.push(y);
                next += 1;
            }
        } else {
            stats.rejected += 1;
            h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok((out, stats))
}

fn initial_step<const N: usize>(y: &[f64; N], dy: &[f64; N], tol: Tolerances, span: f64) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..N {
        let sc = tol.atol + tol.rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (dy[i] / sc).powi(2);
    }
    let (d0, d1) = ((d0 / N as f64).sqrt(), (d1 / N as f64).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.min(span.abs().max(1e-6))
}
