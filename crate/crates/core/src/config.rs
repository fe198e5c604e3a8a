//! Run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{sha256_hex, SplitSpec};
use crate::error::{Error, Result};
use crate::estimation::OptimizerOptions;
use crate::nlme::{FixedEffects, TimeGrid, SIGMA_EPS};
use crate::predictor::{DEFAULT_DOWNSAMPLE, LAMBDA_GRID};
use crate::renderer::RenderConfig;
use crate::sampling::{NoiseLevelSet, DEFAULT_LATENT_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Latents scored by the reconstruction-error ranking.
    pub method1_n: usize,
    /// Base latents scored by the resampling ranking.
    pub method2_n: usize,
    /// Rendered pairs used to fit the encoder.
    pub encoder_n: usize,
    /// Ridge penalty of the encoder. Large values make reconstruction error
    /// track how strongly a dimension moves the image.
    pub encoder_lambda: f64,
    pub downsample: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { method1_n: 2000, method2_n: 2000, encoder_n: 2000, encoder_lambda: 1e4, downsample: DEFAULT_DOWNSAMPLE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub lambda_grid: Vec<f64>,
    pub downsample: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { lambda_grid: LAMBDA_GRID.to_vec(), downsample: DEFAULT_DOWNSAMPLE }
    }
}

/// Thresholds checked by `--check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub min_eb_converged: f64,
    pub min_fraction_of_max: f64,
    /// Levels up to this σ² must reach `min_fraction_of_max`.
    pub fraction_levels_up_to: f64,
    pub max_approx_r2_spread: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { min_eb_converged: 0.99, min_fraction_of_max: 0.5, fraction_levels_up_to: 18.0, max_approx_r2_spread: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub latent_dim: usize,
    pub render: RenderConfig,
    pub levels: NoiseLevelSet,
    pub sigma_eps: f64,
    pub time_grid: TimeGrid,
    pub fixed_effects: FixedEffects,
    pub selection: SelectionConfig,
    pub predictor: PredictorConfig,
    pub split: SplitSpec,
    pub eb: OptimizerOptions,
    pub bootstrap_resamples: usize,
    pub gates: GateConfig,
    /// Where outputs go; not part of the digest.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_917,
            n_subjects: 5000,
            latent_dim: DEFAULT_LATENT_DIM,
            render: RenderConfig::default(),
            levels: NoiseLevelSet::default(),
            sigma_eps: SIGMA_EPS,
            time_grid: TimeGrid::default(),
            fixed_effects: FixedEffects::default(),
            selection: SelectionConfig::default(),
            predictor: PredictorConfig::default(),
            split: SplitSpec::default(),
            eb: OptimizerOptions::default(),
            bootstrap_resamples: 1000,
            gates: GateConfig::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate(self.latent_dim)?;
        if self.n_subjects < 3 {
            return Err(Error::invalid(format!("need at least 3 subjects, got {}", self.n_subjects)));
        }
        self.split.sizes(self.n_subjects)?;
        if !(self.sigma_eps > 0.0) || !self.sigma_eps.is_finite() {
            return Err(Error::invalid(format!("sigma_eps must be positive, got {}", self.sigma_eps)));
        }
        let fx = self.fixed_effects;
        if !(fx.ka_base > 0.0 && fx.imax_base > 0.0 && fx.ic50_base > 0.0) {
            return Err(Error::invalid("fixed-effect bases must be positive"));
        }
        if self.predictor.lambda_grid.is_empty() || self.predictor.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("lambda grid must be non-empty and non-negative"));
        }
        let s = &self.selection;
        if s.method1_n == 0 || s.method2_n == 0 || s.encoder_n == 0 || !(s.encoder_lambda >= 0.0) {
            return Err(Error::invalid("selection sample sizes must be positive and encoder_lambda >= 0"));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::invalid("bootstrap_resamples must be positive"));
        }
        Ok(())
    }

    /// Canonical JSON of everything that influences outputs (sorted keys,
    /// output directory excluded).
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
        }
        Ok(serde_json::to_string(&v)?)
    }

    /// SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_out_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed += 1;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "n_subjects": 10, "levels": [0, 4]}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.levels.levels(), &[0.0, 4.0]);
        assert_eq!(c.latent_dim, 128);
        assert!(RunConfig::from_json(r#"{"sead": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"levels": [1, 4]}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
