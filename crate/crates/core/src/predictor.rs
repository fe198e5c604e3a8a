//! Image → random-effects predictor: ridge regression on standardized
//! block-mean features, plus the feature pipeline it shares with the encoder.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ridge_solve;
use crate::renderer::Image;
use crate::sampling::N_EFFECTS;

/// Features whose training standard deviation is at or below this are dropped.
pub const MIN_FEATURE_STD: f64 = 1e-4;

pub const DEFAULT_DOWNSAMPLE: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Block-mean pooling followed by per-feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub downsample: usize,
    pub height: usize,
    pub width: usize,
    /// Raw feature indices kept, in order.
    pub retained: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Raw feature indices dropped for having (near) zero training variance.
    pub dropped: Vec<usize>,
}

impl FeatureSpec {
    pub fn raw_len(height: usize, width: usize, downsample: usize) -> usize {
        if downsample == 0 {
            return 0;
        }
        (height / downsample) * (width / downsample)
    }

    /// Standardization constants estimated from `images`.
    pub fn fit(images: &[Image], downsample: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot fit features on zero images"))?;
        let (height, width) = (first.height(), first.width());
        let raw = images
            .iter()
            .map(|img| raw_features(img, downsample))
            .collect::<Result<Vec<_>>>()?;
        if images.iter().any(|i| i.height() != height || i.width() != width) {
            return Err(Error::invalid("training images differ in shape"));
        }
        let n = raw.len() as f64;
        let len = raw[0].len();
        let (mut retained, mut mean, mut std, mut dropped) = (vec![], vec![], vec![], vec![]);
        for j in 0..len {
            let m = raw.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = raw.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            let s = v.sqrt();
            if s > MIN_FEATURE_STD {
                retained.push(j);
                mean.push(m);
                std.push(s);
            } else {
                dropped.push(j);
            }
        }
        Ok(Self { downsample, height, width, retained, mean, std, dropped })
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        self.retained
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&j, (m, s))| (raw[j] - m) / s)
            .collect()
    }
}

/// Block means of `img` over `factor × factor` tiles, row-major.
pub fn raw_features(img: &Image, factor: usize) -> Result<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible by downsample factor {factor}"
        )));
    }
    let (bh, bw) = (h / factor, w / factor);
    let mut out = vec![0.0; bh * bw];
    let px = img.pixels();
    for y in 0..h {
        let row = &px[y * w..(y + 1) * w];
        let dst = &mut out[(y / factor) * bw..(y / factor + 1) * bw];
        for (x, &p) in row.iter().enumerate() {
            dst[x / factor] += p;
        }
    }
    let inv = 1.0 / (factor * factor) as f64;
    for v in &mut out {
        *v *= inv;
    }
    Ok(out)
}

/// Standardized features of `img` under `spec`.
pub fn featurize(img: &Image, spec: &FeatureSpec) -> Result<Vec<f64>> {
    if img.height() != spec.height || img.width() != spec.width {
        return Err(Error::invalid(format!(
            "image {}x{} does not match feature spec {}x{}",
            img.height(),
            img.width(),
            spec.height,
            spec.width
        )));
    }
    Ok(spec.standardize(&raw_features(img, spec.downsample)?))
}

/// Affine map from standardized image features to a target vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReadout {
    pub features: FeatureSpec,
    /// `outputs × features`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub lambda: f64,
}

impl LinearReadout {
    pub fn fit(images: &[Image], targets: &[&[f64]], lambda: f64, downsample: usize) -> Result<Self> {
        if images.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} images but {} targets",
                images.len(),
                targets.len()
            )));
        }
        let features = FeatureSpec::fit(images, downsample)?;
        let rows = images
            .iter()
            .map(|img| featurize(img, &features))
            .collect::<Result<Vec<_>>>()?;
        Self::fit_features(features, &rows, targets, lambda)
    }

    /// Fits on precomputed standardized feature rows.
    pub fn fit_features(
        features: FeatureSpec,
        rows: &[Vec<f64>],
        targets: &[&[f64]],
        lambda: f64,
    ) -> Result<Self> {
        let n = rows.len();
        let p = features.len();
        if n == 0 || targets.len() != n {
            return Err(Error::invalid("need at least one (features, target) pair per row"));
        }
        let k = targets[0].len();
        if targets.iter().any(|t| t.len() != k) || rows.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("ragged feature or target rows"));
        }
        if lambda == 0.0 && n < p {
            return Err(Error::numerical(format!(
                "{n} samples for {p} features is singular at lambda = 0; use lambda > 0"
            )));
        }
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let x_mean: Vec<f64> = (0..p).map(|j| x.column(j).sum() / n as f64).collect();
        let t_mean: Vec<f64> = (0..k).map(|c| targets.iter().map(|t| t[c]).sum::<f64>() / n as f64).collect();
        let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - x_mean[j]);
        let tc = DMatrix::from_fn(n, k, |i, c| targets[i][c] - t_mean[c]);
        let w = ridge_solve(&xc, &tc, lambda)?;
        let weights: Vec<Vec<f64>> = (0..k).map(|c| w.column(c).iter().copied().collect()).collect();
        let bias = (0..k)
            .map(|c| t_mean[c] - weights[c].iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(Self { features, weights, bias, lambda })
    }

    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    pub fn apply_features(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.features.len() {
            return Err(Error::invalid(format!(
                "{} features supplied, model expects {}",
                f.len(),
                self.features.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    pub fn apply(&self, img: &Image) -> Result<Vec<f64>> {
        self.apply_features(&featurize(img, &self.features)?)
    }

    /// Mean squared residual pooled over samples and outputs.
    pub fn training_mse(&self, images: &[Image], targets: &[&[f64]]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (img, t) in images.iter().zip(targets) {
            let p = self.apply(img)?;
            sum += p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += t.len();
        }
        Ok(sum / count.max(1) as f64)
    }

    /// Spectral norm of the weight matrix.
    pub fn weight_norm(&self) -> f64 {
        let k = self.weights.len();
        let p = self.features.len();
        crate::linalg::spectral_norm(&DMatrix::from_fn(k, p, |i, j| self.weights[i][j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_train: usize,
    pub seed: u64,
    pub sigma2: f64,
}

/// Predictor of the three random effects from an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub readout: LinearReadout,
    pub meta: TrainingMeta,
}

pub const MODEL_FORMAT: &str = "synthlong-predictor";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    shape: [usize; 2],
    lambda: f64,
    model: PredictorModel,
}

pub fn train(
    images: &[Image],
    targets: &[[f64; N_EFFECTS]],
    lambda: f64,
    downsample: usize,
    meta: TrainingMeta,
) -> Result<PredictorModel> {
    let t: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
    let readout = LinearReadout::fit(images, &t, lambda, downsample)?;
    Ok(PredictorModel { readout, meta })
}

pub fn predict(model: &PredictorModel, img: &Image) -> Result<[f64; N_EFFECTS]> {
    to_effects(model.readout.apply(img)?)
}

fn to_effects(v: Vec<f64>) -> Result<[f64; N_EFFECTS]> {
    let arr: [f64; N_EFFECTS] = v
        .try_into()
        .map_err(|v: Vec<f64>| Error::invalid(format!("model has {} outputs, expected {N_EFFECTS}", v.len())))?;
    if arr.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("prediction is not finite"));
    }
    Ok(arr)
}

/// Validation MSE for each `lambda` in `grid`; returns the best (first on ties).
pub fn select_lambda(
    train_images: &[Image],
    train_targets: &[[f64; N_EFFECTS]],
    val_images: &[Image],
    val_targets: &[[f64; N_EFFECTS]],
    grid: &[f64],
    downsample: usize,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    if val_images.len() != val_targets.len() || val_images.is_empty() {
        return Err(Error::invalid("validation images and targets must be non-empty and aligned"));
    }
    let features = FeatureSpec::fit(train_images, downsample)?;
    let rows = train_images
        .iter()
        .map(|img| featurize(img, &features))
        .collect::<Result<Vec<_>>>()?;
    let val_rows = val_images
        .iter()
        .map(|img| featurize(img, &features))
        .collect::<Result<Vec<_>>>()?;
    let t: Vec<&[f64]> = train_targets.iter().map(|t| t.as_slice()).collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let model = LinearReadout::fit_features(features.clone(), &rows, &t, lambda)?;
        let mut sse = 0.0;
        for (f, target) in val_rows.iter().zip(val_targets) {
            let p = model.apply_features(f)?;
            sse += p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        scores.push((lambda, sse / (val_rows.len() * N_EFFECTS) as f64));
    }
    let best = scores
        .iter()
        .fold(scores[0], |best, &s| if s.1 < best.1 { s } else { best });
    Ok((best.0, scores))
}

impl PredictorModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            shape: [self.readout.outputs(), self.readout.features.len()],
            lambda: self.readout.lambda,
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::format("model file", format!("unknown format tag {:?}", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion { found: file.version, supported: MODEL_VERSION });
        }
        let r = &file.model.readout;
        if file.shape != [r.outputs(), r.features.len()]
            || r.weights.iter().any(|w| w.len() != r.features.len())
            || r.outputs() != N_EFFECTS
        {
            return Err(Error::format("model file", "header shape disagrees with weights"));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataio::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
