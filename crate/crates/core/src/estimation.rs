//! Empirical-Bayes recovery of random effects, the Laplace-approximate
//! marginal likelihood and conditional NLL scoring.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlme::{self, FixedEffects, ObservationSet, TimeGrid};
use crate::ode::Tolerances;
use crate::optim::{nelder_mead, SimplexOptions};
use crate::rng::{self, Stream};
use crate::sampling::{sample_latent, N_EFFECTS};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian prior on the random effects, `N(0, Ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    omega: Matrix3<f64>,
    inverse: Matrix3<f64>,
    log_det: f64,
}

impl Prior {
    pub fn new(omega: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| omega[i][j]);
        if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
            return Err(Error::invalid("omega must be symmetric"));
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::invalid("omega must be positive definite"))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { omega: m, inverse: chol.inverse(), log_det })
    }

    pub fn identity() -> Self {
        Self::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).expect("identity is SPD")
    }

    pub fn omega(&self) -> &Matrix3<f64> {
        &self.omega
    }

    /// `½ ηᵀΩ⁻¹η + ½ ln((2π)³ det Ω)`.
    pub fn neg_log_density(&self, eta: &[f64; N_EFFECTS]) -> f64 {
        let v = Vector3::from_column_slice(eta);
        0.5 * v.dot(&(self.inverse * v)) + 0.5 * (3.0 * LN_2PI + self.log_det)
    }
}

impl Default for Prior {
    fn default() -> Self {
        Self::identity()
    }
}

/// `Σ_j (y_j − c_j)² / (2σ²) + ½ ln(2πσ²)`.
fn gaussian_nll(y: &[f64], c: &[f64], sigma_eps: f64) -> f64 {
    let s2 = sigma_eps * sigma_eps;
    let norm = 0.5 * (LN_2PI + s2.ln());
    y.iter().zip(c).map(|(a, b)| (a - b) * (a - b) / (2.0 * s2) + norm).sum()
}

fn check_sigma_eps(sigma_eps: f64) -> Result<()> {
    if !(sigma_eps > 0.0) || !sigma_eps.is_finite() {
        return Err(Error::invalid(format!("sigma_eps must be finite and positive, got {sigma_eps}")));
    }
    Ok(())
}

/// One subject's MAP problem: observations, prior and model settings.
#[derive(Debug, Clone)]
pub struct EbProblem<'a> {
    pub obs: &'a ObservationSet,
    pub prior: &'a Prior,
    pub sigma_eps: f64,
    pub fixed: FixedEffects,
    pub tol: Tolerances,
    grid: TimeGrid,
}

impl<'a> EbProblem<'a> {
    pub fn new(obs: &'a ObservationSet, prior: &'a Prior, sigma_eps: f64) -> Result<Self> {
        check_sigma_eps(sigma_eps)?;
        if obs.is_empty() {
            return Err(Error::invalid("at least one observation is required"));
        }
        Ok(Self {
            obs,
            prior,
            sigma_eps,
            fixed: FixedEffects::default(),
            tol: Tolerances::default(),
            grid: TimeGrid::new(obs.times.clone())?,
        })
    }

    pub fn with_tolerances(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_fixed_effects(mut self, fixed: FixedEffects) -> Self {
        self.fixed = fixed;
        self
    }

    /// Negative log of conditional likelihood × prior density at `eta`.
    pub fn neg_log_joint(&self, eta: &[f64; N_EFFECTS]) -> Result<f64> {
        let p = nlme::params_from_eta(eta, &self.fixed);
        let traj = nlme::solve_ode(&p, &self.fixed, &self.grid, self.tol)?;
        Ok(gaussian_nll(&self.obs.y, &traj.central, self.sigma_eps) + self.prior.neg_log_density(eta))
    }

    /// Objective as seen by the optimizer: failures and points outside the
    /// search box map to +∞.
    fn search_objective(&self, eta: &[f64; N_EFFECTS]) -> f64 {
        if eta.iter().any(|e| e.abs() > SEARCH_BOX) {
            return f64::INFINITY;
        }
        self.neg_log_joint(eta).unwrap_or(f64::INFINITY)
    }
}

/// Optimizer search is confined to `[-SEARCH_BOX, SEARCH_BOX]³`, one unit
/// beyond the simulation clamp.
pub const SEARCH_BOX: f64 = nlme::ETA_CLAMP + 1.0;

/// `neg_log_joint` with default fixed effects and tolerances.
pub fn neg_log_joint(eta: &[f64; N_EFFECTS], obs: &ObservationSet, prior: &Prior, sigma_eps: f64) -> Result<f64> {
    EbProblem::new(obs, prior, sigma_eps)?.neg_log_joint(eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub simplex: SimplexOptionsDef,
    /// Number of best-scoring starting points refined by the simplex search.
    pub refine_starts: usize,
}

/// Serializable mirror of [`SimplexOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplexOptionsDef {
    pub max_iter: usize,
    pub f_tol: f64,
    pub initial_step: f64,
}

impl From<SimplexOptionsDef> for SimplexOptions {
    fn from(d: SimplexOptionsDef) -> Self {
        SimplexOptions { max_iter: d.max_iter, f_tol: d.f_tol, initial_step: d.initial_step }
    }
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        let s = SimplexOptions::default();
        Self {
            simplex: SimplexOptionsDef { max_iter: s.max_iter, f_tol: s.f_tol, initial_step: s.initial_step },
            refine_starts: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EbResult {
    pub eta_approx: [f64; N_EFFECTS],
    pub objective: f64,
    pub converged: bool,
    pub n_evals: usize,
}

/// The origin followed by the 3³ grid over {−1, 0, 1}³ (origin not repeated).
pub fn start_points() -> Vec<[f64; N_EFFECTS]> {
    let mut pts = vec![[0.0; N_EFFECTS]];
    for a in [-1.0, 0.0, 1.0] {
        for b in [-1.0, 0.0, 1.0] {
            for c in [-1.0, 0.0, 1.0] {
                if (a, b, c) != (0.0, 0.0, 0.0) {
                    pts.push([a, b, c]);
                }
            }
        }
    }
    pts
}

/// MAP estimate of the random effects.
///
/// Every start point is scored, the `refine_starts` best are refined by a
/// simplex search (restarted once from its own optimum), and the lowest
/// objective wins.
pub fn empirical_bayes(problem: &EbProblem<'_>, opts: &OptimizerOptions) -> EbResult {
    let mut evals = 0usize;
    let mut scored: Vec<([f64; N_EFFECTS], f64)> = start_points()
        .into_iter()
        .map(|p| {
            evals += 1;
            (p, problem.search_objective(&p))
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));

    let simplex: SimplexOptions = opts.simplex.into();
    let mut best: Option<EbResult> = None;
    for &(start, f0) in scored.iter().take(opts.refine_starts.max(1)) {
        if !f0.is_finite() {
            continue;
        }
        let first = nelder_mead(|x| problem.search_objective(x), start, simplex);
        let again = nelder_mead(
            |x| problem.search_objective(x),
            first.x,
            SimplexOptions { initial_step: simplex.initial_step * 0.2, ..simplex },
        );
        evals += first.evaluations + again.evaluations;
        let run = if again.f <= first.f { &again } else { &first };
        let candidate = EbResult {
            eta_approx: run.x,
            objective: run.f,
            converged: again.converged && run.f.is_finite(),
            n_evals: 0,
        };
        if best.map_or(true, |b| candidate.objective < b.objective) {
            best = Some(candidate);
        }
    }
    let mut result = best.unwrap_or_else(|| {
        let (p, f) = scored[0];
        EbResult { eta_approx: p, objective: f, converged: false, n_evals: 0 }
    });
    result.n_evals = evals;
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceResult {
    /// Approximate `−log L` with the random effects integrated out.
    pub value: f64,
    pub mode: [f64; N_EFFECTS],
    pub log_det_hessian: f64,
    /// False when the finite-difference Hessian is not positive definite;
    /// `value` then uses `ln |det H|`.
    pub hessian_pd: bool,
    pub mode_converged: bool,
}

/// Central-difference step for the Hessian.
pub const HESSIAN_STEP: f64 = 1e-4;

/// Tolerances used for the objective evaluations inside the Hessian, tight
/// enough that integrator error stays far below the second differences.
pub const HESSIAN_TOLERANCES: Tolerances = Tolerances { rtol: 1e-12, atol: 1e-14 };

/// Central finite-difference Hessian of `f` at `x`.
pub fn fd_hessian<F>(f: F, x: &[f64; N_EFFECTS], h: f64) -> Result<Matrix3<f64>>
where
    F: Fn(&[f64; N_EFFECTS]) -> Result<f64>,
{
    let at = |di: usize, si: f64, dj: usize, sj: f64| -> Result<f64> {
        let mut p = *x;
        p[di] += si * h;
        p[dj] += sj * h;
        f(&p)
    };
    let f0 = f(x)?;
    let mut hess = Matrix3::zeros();
    for i in 0..N_EFFECTS {
        let mut p = *x;
        p[i] += h;
        let fp = f(&p)?;
        p[i] = x[i] - h;
        let fm = f(&p)?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let v = (at(i, 1.0, j, 1.0)? - at(i, 1.0, j, -1.0)? - at(i, -1.0, j, 1.0)? + at(i, -1.0, j, -1.0)?)
                / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Laplace approximation of the marginal negative log-likelihood:
/// `f(η*) + ½ ln det H − (3/2) ln 2π`, with `H` the Hessian of the negative
/// log joint at its minimizer `η*`.
pub fn laplace_marginal_nll(problem: &EbProblem<'_>, opts: &OptimizerOptions) -> Result<LaplaceResult> {
    let eb = empirical_bayes(problem, opts);
    let tight = problem.clone().with_tolerances(HESSIAN_TOLERANCES);
    let mode = eb.eta_approx;
    let f_mode = tight.neg_log_joint(&mode)?;
    let hess = fd_hessian(|e| tight.neg_log_joint(e), &mode, HESSIAN_STEP)?;
    let (log_det, pd) = match hess.cholesky() {
        Some(c) => (2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(), true),
        None => {
            let det = hess.determinant();
            warn!("Hessian at the mode is not positive definite (det = {det:e}); subject {}", problem.obs.subject_id);
            (det.abs().ln(), false)
        }
    };
    Ok(LaplaceResult {
        value: f_mode + 0.5 * log_det - 1.5 * LN_2PI,
        mode,
        log_det_hessian: log_det,
        hessian_pd: pd,
        mode_converged: eb.converged,
    })
}

/// Gaussian NLL of the noiseless reference values under candidate values.
pub fn conditional_nll(reference: &[f64], candidate: &[f64], sigma_eps: f64) -> Result<f64> {
    check_sigma_eps(sigma_eps)?;
    if reference.len() != candidate.len() {
        return Err(Error::invalid(format!(
            "reference has {} values, candidate {}",
            reference.len(),
            candidate.len()
        )));
    }
    Ok(gaussian_nll(reference, candidate, sigma_eps))
}

/// Mean per-subject conditional NLL of each candidate kind at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllRow {
    pub sigma2: f64,
    pub nll_true: f64,
    pub nll_predicted: f64,
    pub nll_approximate: f64,
    pub nll_average: f64,
    pub nll_random: f64,
}

/// Column order of [`NllRow`] / [`NllLevelScores::per_subject`].
pub const NLL_COLUMNS: [&str; 5] = ["true", "predicted", "approximate", "average", "random"];

impl NllRow {
    pub fn values(&self) -> [f64; 5] {
        [self.nll_true, self.nll_predicted, self.nll_approximate, self.nll_average, self.nll_random]
    }
}

/// Inputs for one test subject at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct NllSubject {
    pub subject_id: u64,
    /// Noiseless central amounts simulated from the image-linked effects η.
    pub reference: Vec<f64>,
    /// The noisy observations generated from η̂.
    pub observed: Vec<f64>,
    pub eta_pred: [f64; N_EFFECTS],
    pub eta_approx: [f64; N_EFFECTS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllLevel {
    pub sigma2: f64,
    pub subjects: Vec<NllSubject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllLevelScores {
    pub row: NllRow,
    /// Per subject, in [`NLL_COLUMNS`] order.
    pub per_subject: Vec<[f64; 5]>,
}

/// Conditional NLL table: per level, the mean over subjects for the noisy
/// observations, trajectories from `eta_pred`, `eta_approx`, the zero vector
/// and a fresh `N(0, I)` draw.
pub fn nll_table(
    levels: &[NllLevel],
    fixed: &FixedEffects,
    grid: &TimeGrid,
    sigma_eps: f64,
    seed: u64,
    tol: Tolerances,
) -> Result<Vec<NllLevelScores>> {
    use rayon::prelude::*;
    check_sigma_eps(sigma_eps)?;
    if levels.is_empty() {
        return Err(Error::invalid("nll_table: no levels"));
    }
    let n = levels[0].subjects.len();
    let average = nlme::simulate(&[0.0; N_EFFECTS], fixed, grid, tol)?.central;
    let mut out = Vec::with_capacity(levels.len());
    for level in levels {
        if level.subjects.is_empty() || level.subjects.len() != n {
            return Err(Error::invalid(format!(
                "nll_table: level {} has {} subjects, expected {n}",
                level.sigma2,
                level.subjects.len()
            )));
        }
        let per_subject = level
            .subjects
            .par_iter()
            .map(|s| -> Result<[f64; 5]> {
                if s.reference.len() != grid.len() || s.observed.len() != grid.len() {
                    return Err(Error::invalid(format!("subject {} does not match the grid", s.subject_id)));
                }
                let z = sample_latent(N_EFFECTS, rng::derive_seed(seed, Stream::RandomBaseline, s.subject_id));
                let random: [f64; N_EFFECTS] = std::array::from_fn(|k| z[k]);
                let pred = nlme::simulate(&s.eta_pred, fixed, grid, tol)?.central;
                let approx = nlme::simulate(&s.eta_approx, fixed, grid, tol)?.central;
                let rand_traj = nlme::simulate(&random, fixed, grid, tol)?.central;
                Ok([
                    conditional_nll(&s.reference, &s.observed, sigma_eps)?,
                    conditional_nll(&s.reference, &pred, sigma_eps)?,
                    conditional_nll(&s.reference, &approx, sigma_eps)?,
                    conditional_nll(&s.reference, &average, sigma_eps)?,
                    conditional_nll(&s.reference, &rand_traj, sigma_eps)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut means = [0.0; 5];
        for row in &per_subject {
            for k in 0..5 {
                means[k] += row[k];
            }
        }
        for m in &mut means {
            *m /= per_subject.len() as f64;
        }
        out.push(NllLevelScores {
            row: NllRow {
                sigma2: level.sigma2,
                nll_true: means[0],
                nll_predicted: means[1],
                nll_approximate: means[2],
                nll_average: means[3],
                nll_random: means[4],
            },
            per_subject,
        });
    }
    Ok(out)
}
