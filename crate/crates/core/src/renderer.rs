//! Procedural covariate images.
//!
//! A latent code is decoded into a grayscale image with two horizontal
//! Gaussian-profile bands. Four latent coordinates per band move it
//! vertically, tilt it, bend it and change its brightness; all other
//! coordinates are ignored. An approximate linear encoder and the two
//! influential-dimension rankings live here too.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::LinearReadout;
use crate::rng::{self, Stream};
use crate::sampling::{sample_latent, LatentVector};

/// Grayscale image, row-major, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "image of {height}x{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("pixel {i} = {} outside [0, 1]", pixels[i])));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// 8-bit quantization, rounding half up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize(p)).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// The image as it reads back after 8-bit storage.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.to_u8().into_iter().map(|b| f64::from(b) / 255.0).collect(),
        }
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Image) -> f64 {
        let s: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        s / self.pixels.len() as f64
    }
}

fn quantize(p: f64) -> u8 {
    (p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Latent coordinates that drive one band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandDims {
    pub position: usize,
    pub tilt: usize,
    pub curvature: usize,
    pub luminance: usize,
}

impl BandDims {
    fn as_array(&self) -> [usize; 4] {
        [self.position, self.tilt, self.curvature, self.luminance]
    }
}

/// Scale coefficients from latent coordinates to band geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandGains {
    /// Vertical shift per unit latent, as a fraction of the image height.
    pub position: f64,
    /// Row offset per column away from the centre, per unit latent.
    pub tilt: f64,
    /// Quadratic bend coefficient per unit latent.
    pub curvature: f64,
    /// Logistic slope of the brightness factor.
    pub luminance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    /// Reference row of the band centre.
    pub center: f64,
    /// Gaussian profile standard deviation in pixels.
    pub width: f64,
    /// Peak brightness when the logistic factor is 1.
    pub base_luminance: f64,
    pub dims: BandDims,
    pub gains: BandGains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub bands: [BandSpec; 2],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            background: 0.1,
            bands: [
                BandSpec {
                    center: 20.0,
                    width: 3.0,
                    base_luminance: 0.8,
                    dims: BandDims { position: 17, tilt: 42, curvature: 88, luminance: 5 },
                    gains: BandGains { position: 0.06, tilt: 0.03, curvature: 0.08, luminance: 0.5 },
                },
                BandSpec {
                    center: 44.0,
                    width: 3.0,
                    base_luminance: 0.6,
                    dims: BandDims { position: 63, tilt: 101, curvature: 30, luminance: 120 },
                    gains: BandGains { position: 0.05, tilt: 0.03, curvature: 0.08, luminance: 0.3 },
                },
            ],
        }
    }
}

impl RenderConfig {
    /// The eight driving coordinates, band by band in the order
    /// position, tilt, curvature, luminance.
    pub fn controlled_dims(&self) -> [usize; 8] {
        let a = self.bands[0].dims.as_array();
        let b = self.bands[1].dims.as_array();
        [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
    }

    /// Smallest latent dimension this config can decode.
    pub fn min_latent_dim(&self) -> usize {
        self.controlled_dims().into_iter().max().unwrap_or(0) + 1
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("render size must be positive"));
        }
        let dims = self.controlled_dims();
        for (k, &i) in dims.iter().enumerate() {
            if dims[..k].contains(&i) {
                return Err(Error::invalid(format!("controlled dim {i} used twice")));
            }
            if i >= d {
                return Err(Error::invalid(format!(
                    "controlled dim {i} out of range for latent dimension {d}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.background) {
            return Err(Error::invalid(format!("background {} outside [0, 1)", self.background)));
        }
        for (b, band) in self.bands.iter().enumerate() {
            let g = band.gains;
            let finite = [g.position, g.tilt, g.curvature, g.luminance, band.center, band.base_luminance]
                .iter()
                .all(|v| v.is_finite());
            if !finite || !(band.width > 0.0) || !band.width.is_finite() {
                return Err(Error::invalid(format!("band {b} has non-finite or non-positive parameters")));
            }
        }
        Ok(())
    }
}

/// Decodes `z` into an image.
///
/// For band `b` the centre row at column `x` is
/// `center + g_pos z_pos H + g_tilt z_tilt (x - W/2) + g_curv z_curv (x - W/2)² / W`
/// and its peak brightness is `base · logistic(g_lum z_lum)`. Pixels are the
/// background plus both Gaussian profiles, clamped to `[0, 1]`.
pub fn render(z: &LatentVector, cfg: &RenderConfig) -> Result<Image> {
    if z.dim() < cfg.min_latent_dim() {
        return Err(Error::invalid(format!(
            "latent of dimension {} cannot drive controlled dim {}",
            z.dim(),
            cfg.min_latent_dim() - 1
        )));
    }
    let (h, w) = (cfg.height, cfg.width);
    let half = w as f64 / 2.0;
    let mut pixels = vec![cfg.background; h * w];
    let mut centers = vec![0.0; w];
    for band in &cfg.bands {
        let (d, g) = (band.dims, band.gains);
        let shift = g.position * z[d.position] * h as f64;
        for (x, c) in centers.iter_mut().enumerate() {
            let u = x as f64 - half;
            *c = band.center + shift + g.tilt * z[d.tilt] * u + g.curvature * z[d.curvature] * u * u / w as f64;
        }
        let peak = band.base_luminance * logistic(g.luminance * z[d.luminance]);
        let inv = 1.0 / (2.0 * band.width * band.width);
        for y in 0..h {
            let row = &mut pixels[y * w..(y + 1) * w];
            for (p, &c) in row.iter_mut().zip(&centers) {
                let dy = y as f64 - c;
                *p += peak * (-dy * dy * inv).exp();
            }
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(Image { height: h, width: w, pixels })
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Linear stand-in for an image encoder: latent ≈ W · features(image) + bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub readout: LinearReadout,
    /// Mean squared training residual, pooled over latent coordinates.
    pub training_residual: f64,
}

/// Fits the encoder by ridge regression of every latent coordinate on
/// standardized block-mean features.
pub fn fit_encoder(
    images: &[Image],
    latents: &[LatentVector],
    lambda: f64,
    downsample: usize,
) -> Result<EncoderModel> {
    if images.len() != latents.len() {
        return Err(Error::invalid(format!(
            "fit_encoder: {} images but {} latents",
            images.len(),
            latents.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::invalid("fit_encoder: no training pairs"));
    }
    let d = latents[0].dim();
    if latents.iter().any(|z| z.dim() != d) {
        return Err(Error::invalid("fit_encoder: latents differ in dimension"));
    }
    let targets: Vec<&[f64]> = latents.iter().map(|z| z.values()).collect();
    let readout = LinearReadout::fit(images, &targets, lambda, downsample)?;
    let training_residual = readout.training_mse(images, &targets)?;
    Ok(EncoderModel { readout, training_residual })
}

pub fn encode(img: &Image, enc: &EncoderModel) -> Result<LatentVector> {
    LatentVector::new(enc.readout.apply(img)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfluenceMethod {
    /// Reconstruction error through decode-then-encode; small is influential.
    Method1,
    /// Image change when one coordinate is resampled; large is influential.
    Method2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRanking {
    pub method: InfluenceMethod,
    pub per_dim_score: Vec<f64>,
    /// Dimensions from most to least influential; ties go to the lower index.
    pub ranked_dims: Vec<usize>,
}

impl InfluenceRanking {
    fn from_scores(method: InfluenceMethod, scores: Vec<f64>) -> Self {
        let mut ranked: Vec<usize> = (0..scores.len()).collect();
        // stable sort keeps the lower index first on ties
        match method {
            InfluenceMethod::Method1 => ranked.sort_by(|&a, &b| scores[a].total_cmp(&scores[b])),
            InfluenceMethod::Method2 => ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
        }
        Self { method, per_dim_score: scores, ranked_dims: ranked }
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.ranked_dims[..k.min(self.ranked_dims.len())]
    }

    /// The three most influential dims, in rank order.
    pub fn top3(&self) -> [usize; 3] {
        [self.ranked_dims[0], self.ranked_dims[1], self.ranked_dims[2]]
    }
}

/// Per-dimension MSE between `z` and `encode(render(z))` over `n` fresh latents.
pub fn method1_influence(
    n: usize,
    d: usize,
    cfg: &RenderConfig,
    enc: &EncoderModel,
    seed: u64,
) -> Result<InfluenceRanking> {
    if n == 0 {
        return Err(Error::invalid("method1_influence: n must be at least 1"));
    }
    cfg.validate(d)?;
    let sums = (0..n as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let z = sample_latent(d, rng::derive_seed(seed, Stream::Method1, i));
            let zh = encode(&render(&z, cfg)?, enc)?;
            if zh.dim() != d {
                return Err(Error::invalid(format!(
                    "encoder emits {} coordinates, expected {d}",
                    zh.dim()
                )));
            }
            Ok(z.values().iter().zip(zh.values()).map(|(a, b)| (a - b) * (a - b)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![0.0; d];
    for row in &sums {
        for (s, v) in scores.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in &mut scores {
        *s /= n as f64;
    }
    Ok(InfluenceRanking::from_scores(InfluenceMethod::Method1, scores))
}

/// Mean image MSE caused by resampling each coordinate in turn, over `n`
/// base latents.
pub fn method2_influence(n: usize, d: usize, cfg: &RenderConfig, seed: u64) -> Result<InfluenceRanking> {
    if n == 0 {
        return Err(Error::invalid("method2_influence: n must be at least 1"));
    }
    cfg.validate(d)?;
    let per_base = (0..n as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut rng = rng::stream_rng(seed, Stream::Method2, i);
            let base: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let z = LatentVector::new(base)?;
            let img = render(&z, cfg)?;
            let mut scores = Vec::with_capacity(d);
            let mut alt = z.clone();
            for j in 0..d {
                let v: f64 = rng.sample(StandardNormal);
                alt.values_mut()[j] = v;
                scores.push(img.mse(&render(&alt, cfg)?));
                alt.values_mut()[j] = z[j];
            }
            Ok(scores)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![0.0; d];
    for row in &per_base {
        for (s, v) in scores.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in &mut scores {
        *s /= n as f64;
    }
    Ok(InfluenceRanking::from_scores(InfluenceMethod::Method2, scores))
}

/// Renders `n` fresh latents and fits an encoder to them.
pub fn fit_encoder_on_renders(
    n: usize,
    d: usize,
    cfg: &RenderConfig,
    lambda: f64,
    downsample: usize,
    seed: u64,
) -> Result<EncoderModel> {
    cfg.validate(d)?;
    let latents: Vec<LatentVector> = (0..n as u64)
        .map(|i| sample_latent(d, rng::derive_seed(seed, Stream::EncoderFit, i)))
        .collect();
    let images = latents
        .par_iter()
        .map(|z| render(z, cfg))
        .collect::<Result<Vec<_>>>()?;
    fit_encoder(&images, &latents, lambda, downsample)
}
