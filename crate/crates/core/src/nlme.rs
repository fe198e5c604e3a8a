//! Structural model, parameter maps, trajectory simulation and the
//! observation model.
//!
//! Depot amount `D` and central amount `C` follow
//! `dD/dt = -Ka D` and `dC/dt = Ka D - Imax C / (IC50 + C)`
//! with `D(0) = 1`, `C(0) = 0`. The three random effects enter
//! multiplicatively on the log scale.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, Tolerances};
use crate::rng;
use crate::sampling::N_EFFECTS;

/// Residual standard deviation of the observations.
pub const SIGMA_EPS: f64 = 0.01;

/// Random effects are clamped to `[-ETA_CLAMP, ETA_CLAMP]` before simulation.
pub const ETA_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralParams {
    pub ka: f64,
    pub imax: f64,
    pub ic50: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub ka_base: f64,
    pub imax_base: f64,
    pub ic50_base: f64,
    /// Initial depot amount.
    pub dose: f64,
    /// Initial central amount.
    pub c0: f64,
}

impl Default for FixedEffects {
    fn default() -> Self {
        Self { ka_base: 1.0, imax_base: 2.1, ic50_base: 0.4, dose: 1.0, c0: 0.0 }
    }
}

/// Observation times: strictly increasing, non-negative, finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("time grid is empty"));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::invalid("time grid entries must be finite and non-negative"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        Ok(Self(times))
    }

    /// `n` points at `spacing, 2·spacing, …`.
    pub fn uniform(n: usize, spacing: f64) -> Result<Self> {
        Self::new((1..=n).map(|j| spacing * j as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for TimeGrid {
    /// 21 observations at t = 0.5, 1.0, …, 10.5.
    fn default() -> Self {
        Self((1..=21).map(|j| 0.5 * j as f64).collect())
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.0
    }
}

/// Noiseless model solution on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub depot: Vec<f64>,
    pub central: Vec<f64>,
}

/// Noisy observations of one subject at one association-noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub subject_id: u64,
    pub sigma2: f64,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
}

impl ObservationSet {
    pub fn new(subject_id: u64, sigma2: f64, times: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if times.len() != y.len() {
            return Err(Error::invalid(format!(
                "{} observation times but {} values",
                times.len(),
                y.len()
            )));
        }
        if y.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::invalid("observations must be finite"));
        }
        Ok(Self { subject_id, sigma2, times, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn params_from_eta(eta: &[f64; N_EFFECTS], fx: &FixedEffects) -> StructuralParams {
    StructuralParams {
        ka: fx.ka_base * eta[0].exp(),
        imax: fx.imax_base * eta[1].exp(),
        ic50: fx.ic50_base * eta[2].exp(),
    }
}

pub fn clamp_eta(eta: &[f64; N_EFFECTS]) -> [f64; N_EFFECTS] {
    eta.map(|e| e.clamp(-ETA_CLAMP, ETA_CLAMP))
}

/// Solves the two-compartment system and reports both states at the grid times.
pub fn solve_ode(p: &StructuralParams, fx: &FixedEffects, grid: &TimeGrid, tol: Tolerances) -> Result<Trajectory> {
    if !(p.ka > 0.0 && p.imax > 0.0 && p.ic50 > 0.0) || ![p.ka, p.imax, p.ic50].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("structural parameters must be finite and positive: {p:?}")));
    }
    let StructuralParams { ka, imax, ic50 } = *p;
    let rhs = |_t: f64, y: &[f64; 2]| {
        let absorbed = ka * y[0];
        let c = y[1].max(0.0);
        [-absorbed, absorbed - imax * c / (ic50 + c)]
    };
    let (states, _) = ode::integrate(rhs, 0.0, [fx.dose, fx.c0], grid.times(), tol)
        .map_err(|e| Error::numerical(format!("ODE solve failed for {p:?}: {e}")))?;
    Ok(Trajectory {
        times: grid.times().to_vec(),
        depot: states.iter().map(|s| s[0]).collect(),
        // C is nonnegative in exact arithmetic; drop sub-tolerance undershoot
        central: states.iter().map(|s| s[1].max(0.0)).collect(),
    })
}

/// Trajectory for a random-effect vector, clamped to the simulation box.
pub fn simulate(eta: &[f64; N_EFFECTS], fx: &FixedEffects, grid: &TimeGrid, tol: Tolerances) -> Result<Trajectory> {
    solve_ode(&params_from_eta(&clamp_eta(eta), fx), fx, grid, tol)
}

/// Adds i.i.d. `N(0, sigma_eps²)` noise to the central amounts.
pub fn observe(traj: &Trajectory, sigma_eps: f64, seed: u64, subject_id: u64, sigma2: f64) -> Result<ObservationSet> {
    if !(sigma_eps >= 0.0) || !sigma_eps.is_finite() {
        return Err(Error::invalid(format!("sigma_eps must be finite and >= 0, got {sigma_eps}")));
    }
    let mut rng = rng::rng_from_seed(seed);
    let y = traj
        .central
        .iter()
        .map(|&c| {
            let e: f64 = rng.sample(StandardNormal);
            if sigma_eps == 0.0 {
                c
            } else {
                c + sigma_eps * e
            }
        })
        .collect();
    ObservationSet::new(subject_id, sigma2, traj.times.clone(), y)
}
