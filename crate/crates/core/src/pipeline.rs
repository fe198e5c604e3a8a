//! Pipeline stages. Each stage reads its inputs from the output directory
//! and registers what it writes in the manifest, so any stage can be re-run
//! on its own.

use std::collections::HashMap;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{self, DatasetHandle, DatasetMeta, EbRecord, LevelRecord, SubjectRecord};
use crate::error::{Error, Result};
use crate::estimation::{self, EbProblem, NllLevel, NllSubject, Prior};
use crate::evaluation::{self, Comparison, EvalReport, LevelArtifacts};
use crate::nlme;
use crate::ode::Tolerances;
use crate::predictor::{self, PredictorModel, TrainingMeta};
use crate::renderer::{self, InfluenceRanking};
use crate::rng::{self, Stream};
use crate::sampling::{self, Eta, N_EFFECTS};

pub const SELECTION_FILE: &str = "selection.json";
pub const EB_SUMMARY_FILE: &str = "eb_summary.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

type Effects = [f64; N_EFFECTS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub config_digest: String,
    pub method1: InfluenceRanking,
    pub method2: InfluenceRanking,
    pub encoder_training_residual: f64,
    /// Random-effect indices: the method-2 top three in rank order.
    pub chosen: [usize; N_EFFECTS],
    /// Whether both methods name the same three dimensions.
    pub agreement: bool,
}

fn to_json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Ranks latent dimensions by both methods.
pub fn select_dims(cfg: &RunConfig) -> Result<SelectionReport> {
    cfg.validate()?;
    let s = &cfg.selection;
    info!("fitting selection encoder on {} renders (lambda = {})", s.encoder_n, s.encoder_lambda);
    let enc = renderer::fit_encoder_on_renders(s.encoder_n, cfg.latent_dim, &cfg.render, s.encoder_lambda, s.downsample, cfg.seed)?;
    info!("method 1 over {} latents", s.method1_n);
    let method1 = renderer::method1_influence(s.method1_n, cfg.latent_dim, &cfg.render, &enc, cfg.seed)?;
    info!("method 2 over {} base latents", s.method2_n);
    let method2 = renderer::method2_influence(s.method2_n, cfg.latent_dim, &cfg.render, cfg.seed)?;
    let mut a = method1.top3();
    let mut b = method2.top3();
    a.sort_unstable();
    b.sort_unstable();
    let chosen = method2.top3();
    info!("method 1 top-3 {:?}, method 2 top-3 {:?}", method1.top3(), chosen);
    Ok(SelectionReport {
        config_digest: cfg.digest()?,
        encoder_training_residual: enc.training_residual,
        method1,
        method2,
        chosen,
        agreement: a == b,
    })
}

pub fn cmd_select_dims(cfg: &RunConfig) -> Result<SelectionReport> {
    let report = select_dims(cfg)?;
    dataio::write_atomic(&cfg.out_dir.join(SELECTION_FILE), &to_json_bytes(&report)?)?;
    Ok(report)
}

/// The stored selection if it matches this config, else a fresh one.
fn load_or_select(cfg: &RunConfig) -> Result<SelectionReport> {
    let path = cfg.out_dir.join(SELECTION_FILE);
    if let Ok(text) = std::fs::read_to_string(&path) {
        let report: SelectionReport = serde_json::from_str(&text)?;
        if report.config_digest == cfg.digest()? {
            return Ok(report);
        }
        info!("{} was made with another config; re-running selection", path.display());
    }
    cmd_select_dims(cfg)
}

fn render_subject(cfg: &RunConfig, indices: [usize; N_EFFECTS], id: u64, z: sampling::LatentVector) -> Result<SubjectRecord> {
    let image = renderer::render(&z, &cfg.render)?;
    let eta = sampling::extract_eta(&z, indices, id)?.values;
    Ok(SubjectRecord { id, latent: z, image, eta })
}

fn simulate_level(cfg: &RunConfig, subjects: &[SubjectRecord], sigma2: f64) -> Result<LevelRecord> {
    let rows = subjects
        .par_iter()
        .map(|s| -> Result<_> {
            // noise streams are per subject, shared by every level, so levels
            // differ only through σ²
            let eta = Eta { values: s.eta, subject_id: s.id };
            let hat = sampling::perturb_eta(&eta, sigma2, rng::derive_seed(cfg.seed, Stream::AssociationNoise, s.id))?;
            let traj = nlme::simulate(&hat.values, &cfg.fixed_effects, &cfg.time_grid, Tolerances::default())?;
            let obs = nlme::observe(
                &traj,
                cfg.sigma_eps,
                rng::derive_seed(cfg.seed, Stream::Observation, s.id),
                s.id,
                sigma2,
            )?;
            Ok(((s.id, hat.values), obs))
        })
        .collect::<Result<Vec<_>>>()?;
    let (eta_hat, observations) = rows.into_iter().unzip();
    Ok(LevelRecord { sigma2, eta_hat, observations })
}

/// Generates the dataset: latents, images, effects per level, observations
/// and the split. The manifest is written last.
pub fn cmd_generate(cfg: &RunConfig) -> Result<DatasetHandle> {
    cfg.validate()?;
    let selection = load_or_select(cfg)?;
    let indices = selection.chosen;
    info!("generating {} subjects, random effects from latent dims {indices:?}", cfg.n_subjects);
    let latents = sampling::sample_latents(cfg.n_subjects, cfg.latent_dim, cfg.seed)?;
    let subjects = latents
        .into_par_iter()
        .enumerate()
        .map(|(i, z)| render_subject(cfg, indices, i as u64, z))
        .collect::<Result<Vec<_>>>()?;
    let levels = cfg
        .levels
        .levels()
        .iter()
        .map(|&s2| {
            info!("simulating level sigma2 = {s2}");
            simulate_level(cfg, &subjects, s2)
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<u64> = subjects.iter().map(|s| s.id).collect();
    let splits = dataio::split(&ids, &cfg.split, cfg.seed)?;
    let meta = DatasetMeta {
        master_seed: cfg.seed,
        config_digest: cfg.digest()?,
        effect_indices: indices,
        latent_dim: cfg.latent_dim,
        image_height: cfg.render.height,
        image_width: cfg.render.width,
    };
    // outputs of a previous run would otherwise linger next to the new data
    for stale in [EB_SUMMARY_FILE, REPORT_JSON, REPORT_TEXT] {
        let _ = std::fs::remove_file(cfg.out_dir.join(stale));
    }
    for dir in ["levels", "images"] {
        let _ = std::fs::remove_dir_all(cfg.out_dir.join(dir));
    }
    dataio::write_dataset(&cfg.out_dir, &subjects, &levels, &splits, &meta)?;
    let mut handle = dataio::read_dataset(&cfg.out_dir)?;
    handle.put(SELECTION_FILE, &to_json_bytes(&selection)?)?;
    info!("dataset written to {}", cfg.out_dir.display());
    Ok(handle)
}

/// Opens the dataset and checks it was generated with this config.
pub fn open_dataset(cfg: &RunConfig) -> Result<DatasetHandle> {
    let handle = dataio::read_dataset(&cfg.out_dir)?;
    let m = handle.manifest();
    let missing: Vec<f64> = cfg.levels.levels().iter().copied().filter(|l| !m.levels.contains(l)).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("dataset has no data for noise levels {missing:?}")));
    }
    if m.config_digest != cfg.digest()? {
        return Err(Error::invalid(format!(
            "dataset in {} was generated with a different config (digest {}); regenerate it",
            cfg.out_dir.display(),
            m.config_digest
        )));
    }
    Ok(handle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbLevelSummary {
    pub sigma2: f64,
    pub n: usize,
    pub converged: usize,
    pub fraction_converged: f64,
    pub mean_evaluations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbSummary {
    pub config_digest: String,
    pub levels: Vec<EbLevelSummary>,
}

impl EbSummary {
    pub fn fraction_converged(&self) -> f64 {
        let n: usize = self.levels.iter().map(|l| l.n).sum();
        let c: usize = self.levels.iter().map(|l| l.converged).sum();
        if n == 0 {
            1.0
        } else {
            c as f64 / n as f64
        }
    }
}

/// Empirical-Bayes fits for every subject at every level.
pub fn cmd_fit_eb(cfg: &RunConfig) -> Result<EbSummary> {
    let mut handle = open_dataset(cfg)?;
    let prior = Prior::identity();
    let mut summary = EbSummary { config_digest: cfg.digest()?, levels: vec![] };
    for &s2 in cfg.levels.levels() {
        let obs = handle.observations(s2)?;
        info!("EB fits at sigma2 = {s2} ({} subjects)", obs.len());
        let fits = obs
            .par_iter()
            .map(|o| -> Result<(EbRecord, usize)> {
                let problem = EbProblem::new(o, &prior, cfg.sigma_eps)?.with_fixed_effects(cfg.fixed_effects);
                let r = estimation::empirical_bayes(&problem, &cfg.eb);
                Ok((
                    EbRecord { subject_id: o.subject_id, sigma2: s2, eta: r.eta_approx, objective: r.objective, converged: r.converged },
                    r.n_evals,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let converged = fits.iter().filter(|f| f.0.converged).count();
        let n = fits.len();
        let evals: usize = fits.iter().map(|f| f.1).sum();
        let records: Vec<EbRecord> = fits.into_iter().map(|f| f.0).collect();
        handle.put(&dataio::level_path(s2, "eb.csv"), &dataio::eb_to_csv(&records)?)?;
        summary.levels.push(EbLevelSummary {
            sigma2: s2,
            n,
            converged,
            fraction_converged: if n == 0 { 1.0 } else { converged as f64 / n as f64 },
            mean_evaluations: if n == 0 { 0.0 } else { evals as f64 / n as f64 },
        });
        info!("sigma2 = {s2}: {converged}/{n} converged");
    }
    handle.put(EB_SUMMARY_FILE, &to_json_bytes(&summary)?)?;
    Ok(summary)
}

fn eb_targets(handle: &DatasetHandle, sigma2: f64) -> Result<HashMap<u64, EbRecord>> {
    let rel = dataio::level_path(sigma2, "eb.csv");
    if !handle.manifest().has(&rel) {
        return Err(Error::invalid(format!("no empirical-Bayes targets for noise level {sigma2}; run fit-eb first")));
    }
    Ok(dataio::eb_from_csv(&handle.read(&rel)?)?.into_iter().map(|r| (r.subject_id, r)).collect())
}

fn load_images(handle: &DatasetHandle, ids: &[u64]) -> Result<Vec<renderer::Image>> {
    ids.par_iter().map(|&id| handle.image(id)).collect()
}

fn lookup<T: Copy>(map: &HashMap<u64, T>, ids: &[u64], what: &str) -> Result<Vec<T>> {
    ids.iter()
        .map(|id| map.get(id).copied().ok_or_else(|| Error::invalid(format!("{what} missing for subject {id}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub sigma2: f64,
    pub lambda: f64,
    pub validation_mse: Vec<(f64, f64)>,
    pub config_digest: String,
}

/// One ridge predictor per level, trained on EB targets with λ picked on
/// the validation split.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainingRecord>> {
    let mut handle = open_dataset(cfg)?;
    let splits = handle.splits()?;
    let train_imgs = load_images(&handle, &splits.train)?;
    let val_imgs = load_images(&handle, &splits.val)?;
    let mut out = Vec::new();
    for &s2 in cfg.levels.levels() {
        let eb = eb_targets(&handle, s2)?;
        let eta_of: HashMap<u64, Effects> = eb.iter().map(|(k, r)| (*k, r.eta)).collect();
        let train_t = lookup(&eta_of, &splits.train, "EB target")?;
        let val_t = lookup(&eta_of, &splits.val, "EB target")?;
        let (lambda, scores) =
            predictor::select_lambda(&train_imgs, &train_t, &val_imgs, &val_t, &cfg.predictor.lambda_grid, cfg.predictor.downsample)?;
        let meta = TrainingMeta { n_train: train_imgs.len(), seed: cfg.seed, sigma2: s2 };
        let model = predictor::train(&train_imgs, &train_t, lambda, cfg.predictor.downsample, meta)?;
        info!("sigma2 = {s2}: lambda = {lambda}");
        handle.put(&dataio::level_path(s2, "model.json"), model.to_json()?.as_bytes())?;
        let record = TrainingRecord { sigma2: s2, lambda, validation_mse: scores, config_digest: cfg.digest()? };
        handle.put(&dataio::level_path(s2, "training.json"), &to_json_bytes(&record)?)?;
        out.push(record);
    }
    Ok(out)
}

/// Predictions on the test split for every level.
pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let mut handle = open_dataset(cfg)?;
    let splits = handle.splits()?;
    let test_imgs = load_images(&handle, &splits.test)?;
    for &s2 in cfg.levels.levels() {
        let rel = dataio::level_path(s2, "model.json");
        if !handle.manifest().has(&rel) {
            return Err(Error::invalid(format!("no trained model for noise level {s2}; run train first")));
        }
        let model = PredictorModel::from_json(&String::from_utf8_lossy(&handle.read(&rel)?))?;
        let preds = test_imgs
            .iter()
            .zip(&splits.test)
            .map(|(img, &id)| Ok((id, predictor::predict(&model, img)?)))
            .collect::<Result<Vec<_>>>()?;
        handle.put(&dataio::level_path(s2, "predictions.csv"), &dataio::level_effects_to_csv(s2, &preds)?)?;
    }
    Ok(())
}

/// Metrics, NLL table and bootstrap intervals on the test split.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let mut handle = open_dataset(cfg)?;
    let splits = handle.splits()?;
    let test = &splits.test;
    let eta: HashMap<u64, Effects> = handle.eta()?.into_iter().collect();
    let eta_test = lookup(&eta, test, "eta")?;
    let references = eta_test
        .par_iter()
        .map(|e| Ok(nlme::simulate(e, &cfg.fixed_effects, &cfg.time_grid, Tolerances::default())?.central))
        .collect::<Result<Vec<_>>>()?;

    let mut nll_levels = Vec::new();
    let mut partial = Vec::new();
    for &s2 in cfg.levels.levels() {
        let hat: HashMap<u64, Effects> = handle.eta_hat(s2)?.into_iter().collect();
        let eb: HashMap<u64, Effects> = eb_targets(&handle, s2)?.into_iter().map(|(k, r)| (k, r.eta)).collect();
        let rel = dataio::level_path(s2, "predictions.csv");
        if !handle.manifest().has(&rel) {
            return Err(Error::invalid(format!("no predictions for noise level {s2}; run predict first")));
        }
        let pred: HashMap<u64, Effects> = dataio::level_effects_from_csv(&handle.read(&rel)?)?.1.into_iter().collect();
        let obs: HashMap<u64, nlme::ObservationSet> =
            handle.observations(s2)?.into_iter().map(|o| (o.subject_id, o)).collect();
        let eta_hat = lookup(&hat, test, "eta_hat")?;
        let eta_approx = lookup(&eb, test, "EB estimate")?;
        let eta_pred = lookup(&pred, test, "prediction")?;
        let subjects = test
            .iter()
            .enumerate()
            .map(|(k, id)| {
                let o = obs.get(id).ok_or_else(|| Error::invalid(format!("observations missing for subject {id}")))?;
                Ok(NllSubject {
                    subject_id: *id,
                    reference: references[k].clone(),
                    observed: o.y.clone(),
                    eta_pred: eta_pred[k],
                    eta_approx: eta_approx[k],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nll_levels.push(NllLevel { sigma2: s2, subjects });
        partial.push((s2, eta_hat, eta_approx, eta_pred));
    }
    info!("scoring conditional NLL on {} test subjects", test.len());
    let scores = estimation::nll_table(&nll_levels, &cfg.fixed_effects, &cfg.time_grid, cfg.sigma_eps, cfg.seed, Tolerances::default())?;
    let artifacts: Vec<LevelArtifacts> = partial
        .into_iter()
        .zip(scores)
        .map(|((sigma2, eta_hat, eta_approx, eta_pred), nll)| LevelArtifacts { sigma2, eta_hat, eta_approx, eta_pred, nll })
        .collect();
    info!("bootstrapping ({} resamples)", cfg.bootstrap_resamples);
    let report = evaluation::build_report(&cfg.levels, &artifacts, cfg.bootstrap_resamples, cfg.seed, &cfg.digest()?)?;
    handle.put(REPORT_JSON, &to_json_bytes(&report)?)?;
    handle.put(REPORT_TEXT, report.to_text().as_bytes())?;
    Ok(report)
}

/// Every stage in order.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<EvalReport> {
    fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| {
            log::error!("stage {name} failed");
            e
        })
    }
    stage("select-dims", cmd_select_dims(cfg))?;
    stage("generate", cmd_generate(cfg))?;
    stage("fit-eb", cmd_fit_eb(cfg))?;
    stage("train", cmd_train(cfg))?;
    stage("predict", cmd_predict(cfg))?;
    stage("evaluate", cmd_evaluate(cfg))
}

/// Failed gate descriptions; empty when everything passes.
pub fn check_gates(cfg: &RunConfig, report: &EvalReport, eb: Option<&EbSummary>, selection: Option<&SelectionReport>) -> Vec<String> {
    let g = &cfg.gates;
    let mut failures = Vec::new();
    if let Some(eb) = eb {
        let f = eb.fraction_converged();
        if f < g.min_eb_converged {
            failures.push(format!("EB convergence {f:.4} < {}", g.min_eb_converged));
        }
    }
    if let Some(sel) = selection {
        if !sel.agreement {
            failures.push(format!(
                "selection methods disagree: {:?} vs {:?}",
                sel.method1.top3(),
                sel.method2.top3()
            ));
        }
    }
    let primary: Vec<_> = report.rows_for(Comparison::EtaHatVsPred).collect();
    for w in primary.windows(2) {
        if !(w[1].r2.point < w[0].r2.point) {
            failures.push(format!(
                "R²(eta_hat, eta_pred) not decreasing: {:.4} at σ² = {} vs {:.4} at σ² = {}",
                w[0].r2.point, w[0].sigma2, w[1].r2.point, w[1].sigma2
            ));
        }
    }
    for r in &primary {
        if r.sigma2 <= g.fraction_levels_up_to {
            let f = r.fraction_of_max.unwrap_or(f64::NAN);
            if !(f >= g.min_fraction_of_max) {
                failures.push(format!("fraction of max {f:.4} < {} at σ² = {}", g.min_fraction_of_max, r.sigma2));
            }
        }
    }
    let approx: Vec<f64> = report.rows_for(Comparison::EtaHatVsApprox).map(|r| r.r2.point).collect();
    if let (Some(lo), Some(hi)) = (
        approx.iter().cloned().reduce(f64::min),
        approx.iter().cloned().reduce(f64::max),
    ) {
        if hi - lo >= g.max_approx_r2_spread {
            failures.push(format!("R²(eta_hat, eta_approx) spread {:.4} ≥ {}", hi - lo, g.max_approx_r2_spread));
        }
    }
    for r in &report.nll_rows {
        let v = r.means;
        if !(v.nll_predicted < v.nll_average && v.nll_average < v.nll_random) {
            failures.push(format!(
                "NLL ordering fails at σ² = {}: predicted {:.1}, average {:.1}, random {:.1}",
                r.sigma2, v.nll_predicted, v.nll_average, v.nll_random
            ));
        }
    }
    failures
}

/// Loads the stored report and summaries and checks the gates.
pub fn check_outputs(cfg: &RunConfig) -> Result<()> {
    let handle = open_dataset(cfg)?;
    let read = |rel: &str| -> Result<Vec<u8>> {
        if !handle.manifest().has(rel) {
            return Err(Error::invalid(format!("{rel} is missing; run the earlier stages first")));
        }
        handle.read(rel)
    };
    let report: EvalReport = serde_json::from_slice(&read(REPORT_JSON)?)?;
    let eb: EbSummary = serde_json::from_slice(&read(EB_SUMMARY_FILE)?)?;
    let sel: SelectionReport = serde_json::from_slice(&read(SELECTION_FILE)?)?;
    let failures = check_gates(cfg, &report, Some(&eb), Some(&sel));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::GateFailed(failures.join("; ")))
    }
}
