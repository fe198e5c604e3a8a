//! Latent codes, random-effect extraction and the association-noise transform.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Number of random effects carried by every subject.
pub const N_EFFECTS: usize = 3;

/// Default latent dimension.
pub const DEFAULT_LATENT_DIM: usize = 128;

/// A standard-normal latent code. The image and the random effects of a
/// subject are both functions of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < N_EFFECTS {
            return Err(Error::invalid(format!(
                "latent dimension must be at least {N_EFFECTS}, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("latent entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d.max(N_EFFECTS)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for LatentVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Random effects taken directly from a latent code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eta {
    pub values: [f64; N_EFFECTS],
    pub subject_id: u64,
}

/// Random effects after the association-noise transform at level `sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaHat {
    pub values: [f64; N_EFFECTS],
    pub sigma2: f64,
}

impl EtaHat {
    /// Noise-free random effects used directly as simulation inputs.
    pub fn exact(values: [f64; N_EFFECTS]) -> Self {
        Self { values, sigma2: 0.0 }
    }
}

/// Association-noise variances, ascending, starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseLevelSet(Vec<f64>);

impl NoiseLevelSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("noise level set is empty"));
        }
        if levels[0] != 0.0 {
            return Err(Error::invalid("first noise level must be 0"));
        }
        for w in levels.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::invalid(format!(
                    "noise levels must be finite, distinct and ascending: {levels:?}"
                )));
            }
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, sigma2: f64) -> Option<usize> {
        self.0.iter().position(|&l| l == sigma2)
    }

    pub fn contains(&self, sigma2: f64) -> bool {
        self.position(sigma2).is_some()
    }
}

impl Default for NoiseLevelSet {
    fn default() -> Self {
        Self(vec![0.0, 1.0, 9.0, 18.0, 49.0])
    }
}

impl TryFrom<Vec<f64>> for NoiseLevelSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NoiseLevelSet> for Vec<f64> {
    fn from(s: NoiseLevelSet) -> Self {
        s.0
    }
}

/// Draws one latent vector from its own stream.
pub fn sample_latent(d: usize, seed: u64) -> LatentVector {
    let mut rng = rng::rng_from_seed(seed);
    LatentVector((0..d).map(|_| rng.sample(StandardNormal)).collect())
}

/// Draws `n` latent vectors. Vector `i` depends only on `(seed, i, d)`.
pub fn sample_latents(n: usize, d: usize, seed: u64) -> Result<Vec<LatentVector>> {
    if n == 0 {
        return Err(Error::invalid("sample_latents: n must be at least 1"));
    }
    if d < N_EFFECTS {
        return Err(Error::invalid(format!(
            "sample_latents: d must be at least {N_EFFECTS}, got {d}"
        )));
    }
    Ok((0..n as u64)
        .map(|i| sample_latent(d, rng::derive_seed(seed, Stream::Latent, i)))
        .collect())
}

pub fn validate_indices(indices: [usize; N_EFFECTS], d: usize) -> Result<()> {
    for (k, &i) in indices.iter().enumerate() {
        if i >= d {
            return Err(Error::invalid(format!(
                "effect index {i} out of range for latent dimension {d}"
            )));
        }
        if indices[..k].contains(&i) {
            return Err(Error::invalid(format!("duplicate effect index {i}")));
        }
    }
    Ok(())
}

pub fn extract_eta(z: &LatentVector, indices: [usize; N_EFFECTS], subject_id: u64) -> Result<Eta> {
    validate_indices(indices, z.dim())?;
    Ok(Eta {
        values: indices.map(|i| z[i]),
        subject_id,
    })
}

/// `(eta + r) / sqrt(1 + sigma2)` for a given perturbation `r`.
pub fn perturb_eta_with(eta: &Eta, sigma2: f64, r: [f64; N_EFFECTS]) -> Result<EtaHat> {
    check_sigma2(sigma2)?;
    if sigma2 == 0.0 {
        return Ok(EtaHat {
            values: eta.values,
            sigma2,
        });
    }
    let scale = (1.0 + sigma2).sqrt();
    let mut values = [0.0; N_EFFECTS];
    for k in 0..N_EFFECTS {
        values[k] = (eta.values[k] + r[k]) / scale;
    }
    Ok(EtaHat { values, sigma2 })
}

/// Association-noise transform with `r ~ N(0, sigma2 I)` drawn from `seed`.
pub fn perturb_eta(eta: &Eta, sigma2: f64, seed: u64) -> Result<EtaHat> {
    check_sigma2(sigma2)?;
    let mut rng = rng::rng_from_seed(seed);
    let sd = sigma2.sqrt();
    let r: [f64; N_EFFECTS] = std::array::from_fn(|_| sd * rng.sample::<f64, _>(StandardNormal));
    perturb_eta_with(eta, sigma2, r)
}

/// Best achievable R² of any image-based predictor of the perturbed effects.
pub fn theoretical_max(sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    Ok(1.0 / (1.0 + sigma2))
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!(
            "association-noise variance must be finite and non-negative, got {sigma2}"
        )));
    }
    Ok(())
}
