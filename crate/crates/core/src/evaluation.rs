//! Metrics, percentile bootstrap intervals and the report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{NllLevelScores, NllRow, NLL_COLUMNS};
use crate::rng::{self, Stream};
use crate::sampling::{NoiseLevelSet, N_EFFECTS};

pub type Effects = [f64; N_EFFECTS];

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Neumaier-compensated sum, so results do not depend on summation order
/// beyond the last bit.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn check_shapes(a: &[Effects], b: &[Effects], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("shape mismatch: {} vs {} rows", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::invalid(format!("need at least {min} rows, got {}", a.len())));
    }
    Ok(())
}

/// Mean squared difference pooled over all `n × 3` entries.
pub fn mse(a: &[Effects], b: &[Effects]) -> Result<f64> {
    check_shapes(a, b, 1)?;
    let sse = compensated_sum(a.iter().zip(b).flat_map(|(x, y)| (0..N_EFFECTS).map(move |k| (x[k] - y[k]).powi(2))));
    Ok(sse / (a.len() * N_EFFECTS) as f64)
}

/// Pooled coefficient of determination, centring each dimension on its own mean.
pub fn r_squared(reference: &[Effects], candidate: &[Effects]) -> Result<f64> {
    check_shapes(reference, candidate, 2)?;
    let n = reference.len() as f64;
    let means: Effects = std::array::from_fn(|k| compensated_sum(reference.iter().map(|r| r[k])) / n);
    let sse = compensated_sum(
        reference.iter().zip(candidate).flat_map(|(x, y)| (0..N_EFFECTS).map(move |k| (x[k] - y[k]).powi(2))),
    );
    let sst = compensated_sum(reference.iter().flat_map(|x| (0..N_EFFECTS).map(move |k| (x[k] - means[k]).powi(2))));
    if !(sst > 0.0) {
        return Err(Error::UndefinedMetric("R² is undefined for a reference with zero variance".into()));
    }
    Ok(1.0 - sse / sst)
}

/// R² of each dimension separately.
pub fn r_squared_per_dim(reference: &[Effects], candidate: &[Effects]) -> Result<Effects> {
    check_shapes(reference, candidate, 2)?;
    let n = reference.len() as f64;
    let mut out = [0.0; N_EFFECTS];
    for k in 0..N_EFFECTS {
        let m = compensated_sum(reference.iter().map(|r| r[k])) / n;
        let sse = compensated_sum(reference.iter().zip(candidate).map(|(x, y)| (x[k] - y[k]).powi(2)));
        let sst = compensated_sum(reference.iter().map(|x| (x[k] - m).powi(2)));
        if !(sst > 0.0) {
            return Err(Error::UndefinedMetric(format!("dimension {k} of the reference has zero variance")));
        }
        out[k] = 1.0 - sse / sst;
    }
    Ok(out)
}

/// Achieved R² relative to the ceiling `1 / (1 + σ²)`.
pub fn fraction_of_max(r2: f64, sigma2: f64) -> f64 {
    r2 * (1.0 + sigma2)
}

/// Percentile bootstrap over subjects.
///
/// `metric` receives the resampled subject indices. Resample `b` draws its
/// indices from its own derived stream, so the interval depends only on
/// `(n, metric, resamples, level, seed)`. Resamples on which the metric is
/// undefined (e.g. every draw is the same subject) are dropped; if that is
/// more than half of them the metric itself is reported as undefined.
pub fn bootstrap_ci<F>(n: usize, metric: F, resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n < 2 {
        return Err(Error::invalid(format!("bootstrap needs at least 2 subjects, got {n}")));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("bootstrap needs resamples > 0 and 0 < level < 1"));
    }
    let mut stats = (0..resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream_rng(seed, Stream::Bootstrap, b);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            match metric(&idx) {
                Err(Error::UndefinedMetric(_)) => Ok(None),
                other => other.map(Some),
            }
        })
        .collect::<Result<Vec<Option<f64>>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<f64>>();
    if 2 * stats.len() < resamples {
        return Err(Error::UndefinedMetric(format!(
            "metric undefined on {} of {resamples} bootstrap resamples",
            resamples - stats.len()
        )));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((quantile_sorted(&stats, alpha / 2.0), quantile_sorted(&stats, 1.0 - alpha / 2.0)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootstrapMetric {
    Mse,
    R2,
}

/// Bootstrap interval for a pairwise metric over aligned effect rows.
pub fn bootstrap_pair_ci(
    metric: BootstrapMetric,
    a: &[Effects],
    b: &[Effects],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    check_shapes(a, b, 2)?;
    bootstrap_ci(
        a.len(),
        |idx| {
            let ra: Vec<Effects> = idx.iter().map(|&i| a[i]).collect();
            let rb: Vec<Effects> = idx.iter().map(|&i| b[i]).collect();
            match metric {
                BootstrapMetric::Mse => mse(&ra, &rb),
                BootstrapMetric::R2 => r_squared(&ra, &rb),
            }
        },
        resamples,
        level,
        seed,
    )
}

/// Bootstrap interval for the mean of per-subject values.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    bootstrap_ci(
        values.len(),
        |idx| Ok(compensated_sum(idx.iter().map(|&i| values[i])) / idx.len() as f64),
        resamples,
        level,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Perturbed effects vs image-based predictions.
    EtaHatVsPred,
    /// Perturbed effects vs empirical-Bayes estimates.
    EtaHatVsApprox,
    /// Empirical-Bayes estimates vs image-based predictions.
    ApproxVsPred,
}

impl Comparison {
    pub const ALL: [Comparison; 3] = [Comparison::EtaHatVsPred, Comparison::EtaHatVsApprox, Comparison::ApproxVsPred];

    pub fn terms(&self) -> (&'static str, &'static str) {
        match self {
            Comparison::EtaHatVsPred => ("eta_hat", "eta_pred"),
            Comparison::EtaHatVsApprox => ("eta_hat", "eta_approx"),
            Comparison::ApproxVsPred => ("eta_approx", "eta_pred"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn contains_point(&self) -> bool {
        self.low <= self.point && self.point <= self.high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sigma2: f64,
    pub comparison: Comparison,
    pub mse: Interval,
    pub r2: Interval,
    pub r2_per_dim: Effects,
    pub theoretical_max: Option<f64>,
    pub fraction_of_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReportRow {
    pub sigma2: f64,
    pub means: NllRow,
    /// Intervals in `true, predicted, approximate, average, random` order.
    pub intervals: [Interval; 5],
}

/// Everything measured on the test split at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelArtifacts {
    pub sigma2: f64,
    pub eta_hat: Vec<Effects>,
    pub eta_approx: Vec<Effects>,
    pub eta_pred: Vec<Effects>,
    pub nll: NllLevelScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_rows: Vec<MetricRow>,
    pub nll_rows: Vec<NllReportRow>,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub resamples: usize,
    pub confidence_level: f64,
    pub n_test: usize,
}

/// Builds the report for every level in `levels`; all must be present in
/// `artifacts`.
pub fn build_report(
    levels: &NoiseLevelSet,
    artifacts: &[LevelArtifacts],
    resamples: usize,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport> {
    let missing: Vec<f64> = levels
        .levels()
        .iter()
        .copied()
        .filter(|l| !artifacts.iter().any(|a| a.sigma2 == *l))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("report is missing noise levels {missing:?}")));
    }
    let mut metric_rows = Vec::new();
    let mut nll_rows = Vec::new();
    let mut n_test = 0;
    for &sigma2 in levels.levels() {
        let art = artifacts.iter().find(|a| a.sigma2 == sigma2).expect("checked above");
        n_test = art.eta_hat.len();
        for (ci, cmp) in Comparison::ALL.iter().enumerate() {
            let (a, b) = match cmp {
                Comparison::EtaHatVsPred => (&art.eta_hat, &art.eta_pred),
                Comparison::EtaHatVsApprox => (&art.eta_hat, &art.eta_approx),
                Comparison::ApproxVsPred => (&art.eta_approx, &art.eta_pred),
            };
            let s = rng::derive_seed2(seed, Stream::Bootstrap, sigma2.to_bits(), ci as u64);
            let m = mse(a, b)?;
            let r2 = r_squared(a, b)?;
            let (ml, mh) = bootstrap_pair_ci(BootstrapMetric::Mse, a, b, resamples, DEFAULT_LEVEL, s)?;
            let (rl, rh) = bootstrap_pair_ci(BootstrapMetric::R2, a, b, resamples, DEFAULT_LEVEL, s)?;
            let is_primary = *cmp == Comparison::EtaHatVsPred;
            metric_rows.push(MetricRow {
                sigma2,
                comparison: *cmp,
                mse: Interval { point: m, low: ml, high: mh },
                r2: Interval { point: r2, low: rl, high: rh },
                r2_per_dim: r_squared_per_dim(a, b)?,
                theoretical_max: is_primary.then(|| 1.0 / (1.0 + sigma2)),
                fraction_of_max: is_primary.then(|| fraction_of_max(r2, sigma2)),
            });
        }
        let means = art.nll.row;
        let vals = means.values();
        let mut intervals = [Interval { point: 0.0, low: 0.0, high: 0.0 }; 5];
        for k in 0..5 {
            let column: Vec<f64> = art.nll.per_subject.iter().map(|r| r[k]).collect();
            let s = rng::derive_seed2(seed, Stream::Bootstrap, sigma2.to_bits(), 10 + k as u64);
            let (lo, hi) = bootstrap_mean_ci(&column, resamples, DEFAULT_LEVEL, s)?;
            intervals[k] = Interval { point: vals[k], low: lo, high: hi };
        }
        nll_rows.push(NllReportRow { sigma2, means, intervals });
    }
    Ok(EvalReport {
        metric_rows,
        nll_rows,
        config_digest: config_digest.to_string(),
        seeds: BTreeMap::from([("bootstrap".to_string(), seed)]),
        resamples,
        confidence_level: DEFAULT_LEVEL,
        n_test,
    })
}

fn fmt_interval(i: &Interval, prec: usize) -> String {
    format!("{:.p$} [{:.p$}, {:.p$}]", i.point, i.low, i.high, p = prec)
}

impl EvalReport {
    pub fn rows_for(&self, cmp: Comparison) -> impl Iterator<Item = &MetricRow> {
        self.metric_rows.iter().filter(move |r| r.comparison == cmp)
    }

    /// Aligned plain-text rendering of both tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Random-effect recovery on the test split (n = {}, {} bootstrap resamples)", self.n_test, self.resamples);
        let _ = writeln!(
            s,
            "{:>6}  {:<10} {:<10}  {:<28}  {:<28}  {:>8}  {:>8}",
            "sigma2", "term 1", "term 2", "MSE", "R2", "max", "fraction"
        );
        for r in &self.metric_rows {
            let (a, b) = r.comparison.terms();
            let _ = writeln!(
                s,
                "{:>6}  {:<10} {:<10}  {:<28}  {:<28}  {:>8}  {:>8}",
                r.sigma2,
                a,
                b,
                fmt_interval(&r.mse, 4),
                fmt_interval(&r.r2, 4),
                r.theoretical_max.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.fraction_of_max.map(|v| format!("{v:.4}")).unwrap_or_default(),
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Mean conditional NLL of the noiseless reference");
        let _ = write!(s, "{:>6}", "sigma2");
        for c in NLL_COLUMNS {
            let _ = write!(s, "  {c:<24}");
        }
        let _ = writeln!(s);
        for r in &self.nll_rows {
            let _ = write!(s, "{:>6}", r.sigma2);
            for i in &r.intervals {
                let _ = write!(s, "  {:<24}", fmt_interval(i, 1));
            }
            let _ = writeln!(s);
        }
        s
    }
}
