//! End-to-end acceptance checks. Runs without the libtest harness so that every
//! check prints one PASS/FAIL line; the process fails if any check fails.
//!
//! The desk-scale pipeline (5000 subjects) runs once and feeds checks 6–8 and 11.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{eb_default, observe_default, quadrature_marginal_nll, rk4_central};
use rand::Rng;
use rand_distr::StandardNormal;
use synthlong::config::RunConfig;
use synthlong::estimation::{conditional_nll, fd_hessian, laplace_marginal_nll, EbProblem, OptimizerOptions, Prior};
use synthlong::evaluation::{bootstrap_mean_ci, r_squared, Comparison, Effects, EvalReport};
use synthlong::nlme::{self, clamp_eta, params_from_eta, FixedEffects, TimeGrid, SIGMA_EPS};
use synthlong::ode::Tolerances;
use synthlong::pipeline::{self, EbSummary, SelectionReport};
use synthlong::predictor::{predict, PredictorModel};
use synthlong::renderer::render;
use synthlong::rng::{derive_seed, rng_from_seed, Stream};
use synthlong::sampling::{extract_eta, perturb_eta, sample_latent, sample_latents};

const LEVELS: [f64; 5] = [0.0, 1.0, 9.0, 18.0, 49.0];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {:.1?}, limit {:.0?}", elapsed, limit))
    }
}

fn noise_transform_law() -> Outcome {
    let start = Instant::now();
    let n = 100_000;
    let latents = sample_latents(n, 128, 11).map_err(|e| e.to_string())?;
    let eta: Vec<Effects> = latents
        .iter()
        .enumerate()
        .map(|(i, z)| extract_eta(z, [17, 63, 5], i as u64).unwrap().values)
        .collect();
    let mut notes = Vec::new();
    let mut ok = true;
    for s2 in LEVELS {
        let hat: Vec<Effects> = latents
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let e = extract_eta(z, [17, 63, 5], i as u64).unwrap();
                perturb_eta(&e, s2, derive_seed(12 + s2 as u64, Stream::AssociationNoise, i as u64)).unwrap().values
            })
            .collect();
        let target = 1.0 / (1.0 + s2).sqrt();
        for k in 0..3 {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (a, b) in eta.iter().zip(&hat) {
                sx += a[k];
                sy += b[k];
                sxx += a[k] * a[k];
                syy += b[k] * b[k];
                sxy += a[k] * b[k];
            }
            let nf = n as f64;
            let var_hat = (syy - sy * sy / nf) / (nf - 1.0);
            let cov = (sxy - sx * sy / nf) / (nf - 1.0);
            let corr = cov / (((sxx - sx * sx / nf) / (nf - 1.0)) * var_hat).sqrt();
            if !(var_hat > 0.97 && var_hat < 1.03) || (corr - target).abs() > 0.01 {
                ok = false;
                notes.push(format!("σ²={s2} dim {k}: var {var_hat:.4}, corr {corr:.4} vs {target:.4}"));
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    check(ok, if ok { format!("all 15 (level, dim) pairs in range, {:.1?}", start.elapsed()) } else { notes.join("; ") })
}

fn theoretical_ceiling() -> Outcome {
    // the best image-side predictor is E[η̂ | η] = η/√(1+σ²)
    let start = Instant::now();
    let n = 100_000;
    let latents = sample_latents(n, 3, 21).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for s2 in LEVELS {
        let mut hat = Vec::with_capacity(n);
        let mut oracle = Vec::with_capacity(n);
        for (i, z) in latents.iter().enumerate() {
            let e = extract_eta(z, [0, 1, 2], i as u64).unwrap();
            hat.push(perturb_eta(&e, s2, derive_seed(22, Stream::AssociationNoise, i as u64)).unwrap().values);
            oracle.push(e.values.map(|v| v / (1.0 + s2).sqrt()));
        }
        let r2 = r_squared(&hat, &oracle).map_err(|e| e.to_string())?;
        let max = 1.0 / (1.0 + s2);
        ok &= (r2 - max).abs() < 0.01;
        parts.push(format!("{r2:.4}/{max:.4}"));
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    check(ok, format!("R² vs ceiling: {}", parts.join(", ")))
}

fn ode_correctness() -> Outcome {
    let start = Instant::now();
    let fx = FixedEffects::default();
    let grid = TimeGrid::default();
    let (mut worst_d, mut worst_c) = (0.0f64, 0.0f64);
    for s in 0..30u64 {
        let z = sample_latent(3, 31_000 + s);
        let eta = clamp_eta(&[2.5 * z[0], 2.5 * z[1], 2.5 * z[2]]);
        let p = params_from_eta(&eta, &fx);
        let tr = nlme::simulate(&eta, &fx, &grid, Tolerances::default()).map_err(|e| e.to_string())?;
        let oracle = rk4_central(p.ka, p.imax, p.ic50, grid.times(), 1e-5);
        for (j, &t) in grid.times().iter().enumerate() {
            worst_d = worst_d.max((tr.depot[j] - (-p.ka * t).exp()).abs());
            worst_c = worst_c.max((tr.central[j] - oracle[j]).abs());
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    check(worst_d < 1e-8 && worst_c < 1e-6, format!("max |ΔD| {worst_d:.2e}, max |ΔC| {worst_c:.2e}"))
}

fn nll_magnitude() -> Outcome {
    let n = 10_000u64;
    let fx = FixedEffects::default();
    let grid = TimeGrid::default();
    let mut total = 0.0;
    for i in 0..n {
        let z = sample_latent(3, derive_seed(41, Stream::Latent, i));
        let eta = [z[0], z[1], z[2]];
        let tr = nlme::simulate(&eta, &fx, &grid, Tolerances::default()).map_err(|e| e.to_string())?;
        let obs = nlme::observe(&tr, SIGMA_EPS, derive_seed(42, Stream::Observation, i), i, 0.0).map_err(|e| e.to_string())?;
        total += conditional_nll(&tr.central, &obs.y, SIGMA_EPS).map_err(|e| e.to_string())?;
    }
    let mean = total / n as f64;
    check(mean > -68.5 && mean < -65.3, format!("mean NLL of noisy truth {mean:.3} over {n} subjects"))
}

fn eb_recovery() -> Outcome {
    let prior = Prior::identity();
    let n = 500u64;
    let (mut recovered, mut converged) = (0, 0);
    let mut errors: Vec<[f64; 3]> = Vec::new();
    for i in 0..n {
        let z = sample_latent(3, derive_seed(51, Stream::Latent, i));
        let eta = [z[0], z[1], z[2]];
        let obs = observe_default(eta, SIGMA_EPS, derive_seed(52, Stream::Observation, i), i);
        let fit = eb_default(&obs, &prior);
        let err: [f64; 3] = std::array::from_fn(|k| (fit.eta_approx[k] - eta[k]).abs());
        if err.iter().all(|e| *e < 0.05) {
            recovered += 1;
        }
        if fit.converged {
            converged += 1;
        }
        errors.push(err);
    }
    let median = |k: usize| {
        let mut v: Vec<f64> = errors.iter().map(|e| e[k]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let frac = recovered as f64 / n as f64;
    let conv = converged as f64 / n as f64;
    check(
        frac >= 0.95 && conv >= 0.99,
        format!(
            "{:.1}% within 0.05 on every coordinate, {:.1}% converged; median |error| ({:.3}, {:.3}, {:.3})",
            100.0 * frac,
            100.0 * conv,
            median(0),
            median(1),
            median(2)
        ),
    )
}

struct DeskRun {
    report: EvalReport,
    eb: EbSummary,
    elapsed: Duration,
    /// Fraction of max of the trained predictors on fresh subjects, free of
    /// test-split sampling error. Diagnostic only.
    population_fraction: Vec<f64>,
}

fn population_fraction(dir: &Path, cfg: &RunConfig, n: usize) -> Result<Vec<f64>, String> {
    let err = |e: synthlong::Error| e.to_string();
    let manifest = synthlong::dataio::Manifest::load(dir).map_err(err)?;
    let latents = sample_latents(n, cfg.latent_dim, cfg.seed ^ 0x5eed).map_err(err)?;
    let images = latents.iter().map(|z| render(z, &cfg.render)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let mut out = Vec::new();
    for &s2 in cfg.levels.levels() {
        let model = PredictorModel::load(&dir.join(synthlong::dataio::level_path(s2, "model.json"))).map_err(err)?;
        let mut hat = Vec::with_capacity(n);
        let mut pred = Vec::with_capacity(n);
        for (i, (z, img)) in latents.iter().zip(&images).enumerate() {
            let e = extract_eta(z, manifest.effect_indices, i as u64).map_err(err)?;
            hat.push(perturb_eta(&e, s2, derive_seed(cfg.seed ^ 0x5eed, Stream::AssociationNoise, i as u64)).map_err(err)?.values);
            pred.push(predict(&model, img).map_err(err)?);
        }
        out.push(r_squared(&hat, &pred).map_err(err)? * (1.0 + s2));
    }
    Ok(out)
}

fn desk_run(dir: &Path) -> Result<DeskRun, String> {
    let cfg = RunConfig { out_dir: dir.to_path_buf(), ..RunConfig::default() };
    let start = Instant::now();
    let report = pipeline::cmd_pipeline(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let eb: EbSummary = serde_json::from_slice(&std::fs::read(dir.join(pipeline::EB_SUMMARY_FILE)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let population_fraction = population_fraction(dir, &cfg, 20_000)?;
    Ok(DeskRun { report, eb, elapsed, population_fraction })
}

fn noise_level_invariance(run: &DeskRun) -> Outcome {
    let r2: Vec<f64> = run.report.rows_for(Comparison::EtaHatVsApprox).map(|r| r.r2.point).collect();
    let spread = r2.iter().cloned().fold(f64::MIN, f64::max) - r2.iter().cloned().fold(f64::MAX, f64::min);
    check(
        r2.len() == 5 && spread < 0.02,
        format!(
            "R²(η̂, η_approx) = {:.4?}, spread {spread:.4}; {:.2}% of EB fits converged",
            r2,
            100.0 * run.eb.fraction_converged()
        ),
    )
}

fn signal_recovery(run: &DeskRun) -> Outcome {
    let rows: Vec<_> = run.report.rows_for(Comparison::EtaHatVsPred).collect();
    let decreasing = rows.windows(2).all(|w| w[1].r2.point < w[0].r2.point);
    let fractions: Vec<f64> = rows.iter().map(|r| r.r2.point * (1.0 + r.sigma2)).collect();
    let enough = rows.iter().zip(&fractions).filter(|(r, _)| r.sigma2 <= 18.0).all(|(_, f)| *f >= 0.5);
    within(run.elapsed, Duration::from_secs(45 * 60))?;
    check(
        rows.len() == 5 && decreasing && enough,
        format!(
            "R²(η̂, η_pred) = {:.4?}, fraction of max = {:.3?} (same models on 20000 fresh subjects: {:.3?}), pipeline {:.0?}",
            rows.iter().map(|r| r.r2.point).collect::<Vec<_>>(),
            fractions,
            run.population_fraction,
            run.elapsed
        ),
    )
}

fn nll_orderings(run: &DeskRun) -> Outcome {
    let rows = &run.report.nll_rows;
    let mut notes = Vec::new();
    let mut ok = rows.len() == 5;
    for r in rows {
        let m = r.means;
        if !(m.nll_predicted < m.nll_average && m.nll_average < m.nll_random) {
            ok = false;
        }
        notes.push(format!("σ²={}: {:.1} < {:.1} < {:.1}", r.sigma2, m.nll_predicted, m.nll_average, m.nll_random));
    }
    // every level's Average mean must sit inside every level's Average interval
    for a in rows {
        for b in rows {
            let ci = b.intervals[3];
            if !(ci.low <= a.means.nll_average && a.means.nll_average <= ci.high) {
                ok = false;
                notes.push(format!("average at σ²={} outside the CI at σ²={}", a.sigma2, b.sigma2));
            }
        }
    }
    check(ok, notes.join("; "))
}

fn selection_agreement() -> Outcome {
    let cfg = RunConfig::default();
    let render = &cfg.render;
    let sel: SelectionReport = pipeline::select_dims(&cfg).map_err(|e| e.to_string())?;
    let (m1, m2) = (sel.method1, sel.method2);
    let mut a = m1.top3();
    let mut b = m2.top3();
    a.sort();
    b.sort();
    // band centres dominate the image, followed by the brighter band's luminance
    let bands = &render.bands;
    let mut dominant = [bands[0].dims.position, bands[1].dims.position, bands[0].dims.luminance];
    dominant.sort();
    check(a == b && a == dominant, format!("method 1 {a:?}, method 2 {b:?}, gain-dominant {dominant:?}"))
}

fn laplace_vs_quadrature() -> Outcome {
    let prior = Prior::identity();
    let mut worst = 0.0f64;
    for s in 0..10u64 {
        let z = sample_latent(3, derive_seed(101, Stream::Latent, s));
        let obs = observe_default([z[0], z[1], z[2]], SIGMA_EPS, derive_seed(102, Stream::Observation, s), s);
        let p = EbProblem::new(&obs, &prior, SIGMA_EPS).map_err(|e| e.to_string())?;
        let lap = laplace_marginal_nll(&p, &OptimizerOptions::default()).map_err(|e| e.to_string())?;
        let h = fd_hessian(|e| p.neg_log_joint(e), &lap.mode, 1e-4).map_err(|e| e.to_string())?;
        let l = h.try_inverse().and_then(|c| c.cholesky()).ok_or("posterior covariance is not SPD")?.l();
        let chol: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| l[(r, c)]));
        let quad = quadrature_marginal_nll(|e| p.neg_log_joint(e).unwrap_or(f64::INFINITY), lap.mode, chol, 8.0);
        worst = worst.max((lap.value - quad).abs());
    }
    check(worst < 0.5, format!("max |Laplace − quadrature| = {worst:.4} nats over 10 subjects"))
}

fn bootstrap_properties(run: Option<&DeskRun>) -> Outcome {
    let mut rng = rng_from_seed(111);
    let x: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let a = bootstrap_mean_ci(&x, 1000, 0.95, 7).map_err(|e| e.to_string())?;
    let b = bootstrap_mean_ci(&x, 1000, 0.95, 7).map_err(|e| e.to_string())?;
    let deterministic = a == b;

    let run = run.ok_or("desk pipeline run unavailable")?;
    let mut outside = 0;
    for r in &run.report.metric_rows {
        outside += (!r.mse.contains_point()) as usize + (!r.r2.contains_point()) as usize;
    }
    for r in &run.report.nll_rows {
        outside += r.intervals.iter().filter(|i| !i.contains_point()).count();
    }

    let reps = 500u64;
    let mut hits = 0;
    for rep in 0..reps {
        let mut rng = rng_from_seed(derive_seed(112, Stream::Bootstrap, rep));
        let x: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal) + 2.0).collect();
        let (lo, hi) = bootstrap_mean_ci(&x, 1000, 0.95, rep).map_err(|e| e.to_string())?;
        hits += (lo <= 2.0 && 2.0 <= hi) as usize;
    }
    let coverage = hits as f64 / reps as f64;
    check(
        deterministic && outside == 0 && coverage > 0.92 && coverage < 0.98,
        format!("deterministic {deterministic}, {outside} report intervals miss their point, coverage {coverage:.3}"),
    )
}

fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, synthlong::dataio::sha256_hex(&std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn reproducibility() -> Outcome {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let cfg = RunConfig { n_subjects: 300, out_dir: base.path().join(name), ..RunConfig::default() };
        pipeline::cmd_pipeline(&cfg).map_err(|e| e.to_string())?;
        trees.push(tree_digest(&cfg.out_dir));
    }
    let differing: Vec<&String> = trees[0].keys().filter(|k| trees[1].get(*k) != trees[0].get(*k)).collect();
    check(
        trees[0] == trees[1],
        format!("{} files per tree, {} differ {:?}", trees[0].len(), differing.len(), differing),
    )
}

fn main() {
    let _ = std::env::args(); // accept and ignore libtest flags
    let desk_dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run_check = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {id:>2} {name}: {detail} [{:.1?}]", start.elapsed());
        results.push((id, name, outcome));
    };

    run_check(1, "noise-transform law", &mut noise_transform_law);
    run_check(2, "theoretical ceiling", &mut theoretical_ceiling);
    run_check(3, "ODE correctness", &mut ode_correctness);
    run_check(4, "conditional-NLL magnitude", &mut nll_magnitude);
    run_check(5, "empirical-Bayes recovery", &mut eb_recovery);

    let desk = desk_run(desk_dir.path());
    let desk_err = desk.as_ref().err().cloned();
    let with_desk = |f: fn(&DeskRun) -> Outcome| {
        let d = desk.as_ref();
        let e = desk_err.clone();
        move || match d {
            Ok(r) => f(r),
            Err(_) => Err(format!("desk pipeline failed: {}", e.clone().unwrap_or_default())),
        }
    };
    run_check(6, "noise-level invariance", &mut with_desk(noise_level_invariance));
    run_check(7, "end-to-end signal recovery", &mut with_desk(signal_recovery));
    run_check(8, "NLL orderings", &mut with_desk(nll_orderings));
    run_check(9, "selection procedures", &mut selection_agreement);
    run_check(10, "Laplace vs quadrature", &mut laplace_vs_quadrature);
    run_check(11, "bootstrap intervals", &mut || bootstrap_properties(desk.as_ref().ok()));
    run_check(12, "reproducibility", &mut reproducibility);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("\n{} of {} acceptance checks passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
