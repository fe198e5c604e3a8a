#![allow(dead_code)]

use synthlong::estimation::{EbProblem, OptimizerOptions};
use synthlong::nlme::{self, FixedEffects, ObservationSet, TimeGrid};
use synthlong::ode::Tolerances;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Classic RK4 with a fixed step; returns C at each grid time.
pub fn rk4_central(ka: f64, imax: f64, ic50: f64, times: &[f64], h: f64) -> Vec<f64> {
    let rhs = |d: f64, c: f64| (-ka * d, ka * d - imax * c / (ic50 + c));
    let (mut t, mut d, mut c) = (0.0f64, 1.0f64, 0.0f64);
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target - 1e-12 {
            let step = h.min(target - t);
            let (k1d, k1c) = rhs(d, c);
            let (k2d, k2c) = rhs(d + 0.5 * step * k1d, c + 0.5 * step * k1c);
            let (k3d, k3c) = rhs(d + 0.5 * step * k2d, c + 0.5 * step * k2c);
            let (k4d, k4c) = rhs(d + step * k3d, c + step * k3c);
            d += step / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
            c += step / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c);
            t += step;
        }
        out.push(c);
    }
    out
}

/// `−ln ∫ exp(−f(η)) dη` by a 41³ tensor grid. The grid is centred on `mode`
/// and sheared by `chol_cov` (lower Cholesky factor of a covariance guess),
/// spanning ±`half_width` in the whitened coordinates. Trapezoid weights.
pub fn quadrature_marginal_nll<F>(f: F, mode: [f64; 3], chol_cov: [[f64; 3]; 3], half_width: f64) -> f64
where
    F: Fn(&[f64; 3]) -> f64 + Sync,
{
    use rayon::prelude::*;
    const NODES: usize = 41;
    let step = 2.0 * half_width / (NODES - 1) as f64;
    let u = |i: usize| -half_width + step * i as f64;
    let w = |i: usize| if i == 0 || i == NODES - 1 { 0.5f64 } else { 1.0 };
    let logs: Vec<f64> = (0..NODES * NODES * NODES)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx / (NODES * NODES), (idx / NODES) % NODES, idx % NODES);
            let v = [u(i), u(j), u(k)];
            let mut eta = mode;
            for r in 0..3 {
                for c in 0..=r {
                    eta[r] += chol_cov[r][c] * v[c];
                }
            }
            -f(&eta) + (w(i) * w(j) * w(k)).ln()
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    let det: f64 = (0..3).map(|r| chol_cov[r][r]).product();
    -(m + sum.ln() + 3.0 * step.ln() + det.ln())
}

/// Observations of the trajectory of `eta` on the default grid.
pub fn observe_default(eta: [f64; 3], sigma_eps: f64, seed: u64, id: u64) -> ObservationSet {
    let fx = FixedEffects::default();
    let traj = nlme::simulate(&eta, &fx, &TimeGrid::default(), Tolerances::default()).unwrap();
    nlme::observe(&traj, sigma_eps, seed, id, 0.0).unwrap()
}

pub fn eb_default(obs: &ObservationSet, prior: &synthlong::estimation::Prior) -> synthlong::estimation::EbResult {
    let p = EbProblem::new(obs, prior, nlme::SIGMA_EPS).unwrap();
    synthlong::estimation::empirical_bayes(&p, &OptimizerOptions::default())
}
