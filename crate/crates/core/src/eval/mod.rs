//! Analysis pipeline: ratemaps, autocorrelograms, gridness, Fourier
//! lattice summaries, module clustering, distance curves, torus structure
//! and commutation of the learned dynamics.

pub mod autocorr;
pub mod cluster;
pub mod commutation;
pub mod curves;
mod fft;
pub mod image;
pub mod pipeline;
pub mod ratemap;
pub mod spectral;
pub mod torus;

pub use autocorr::{autocorrelogram, grid_score, Autocorrelogram, GridScore};
pub use ratemap::{Ratemap, RatemapAccumulator};

use crate::io::BinaryError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unit {unit}: only {:.1}% of bins are valid", fraction * 100.0)]
    Coverage { unit: usize, fraction: f64 },
    #[error("unit {0}: ratemap is constant")]
    ConstantMap(usize),
    #[error("insufficient samples: {0}")]
    Samples(String),
    #[error("invalid evaluation settings: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Binary(#[from] BinaryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
