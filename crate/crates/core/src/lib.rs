//! Self-supervised training of velocity-driven recurrent networks whose
//! hidden units develop grid-cell tuning, together with the analysis
//! pipeline used to characterize them.
//!
//! The differentiable parts ([`autodiff`], [`model`], [`losses`],
//! [`trainer`]) are generic over the [`Scalar`] type; the aliases below fix
//! the two supported precisions. Geometry, trajectories and the analysis
//! pipeline work in `f64`.

pub mod autodiff;
pub mod eval;
pub mod gridcode;
pub mod io;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod trainer;
pub mod trajectory;

pub use scalar::{MatRef, Precision, Scalar};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
