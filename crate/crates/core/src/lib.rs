//! Synthetic imaging-to-longitudinal benchmark: latent codes are rendered
//! into images, a subset of the code drives a pharmacokinetic mixed-effects
//! model, and image-based predictors are scored on how much of the
//! subject-level variation they recover.

pub mod config;
pub mod dataio;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod linalg;
pub mod nlme;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod predictor;
pub mod renderer;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
