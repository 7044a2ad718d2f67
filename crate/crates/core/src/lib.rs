//! Matched stacked difference-in-differences for health shocks and the
//! mitigating role of medical innovation.
//!
//! The pipeline runs registry ingestion → propensity matching → stacking
//! → fixed-effects estimation → diagnostics, heterogeneity and robustness,
//! with a seeded simulator that plants known effects for verification.

pub mod config;
pub mod error;
pub mod estimator;
pub mod heterogeneity;
pub mod innovation;
pub mod io;
pub mod linalg;
pub mod matching;
pub mod pipeline;
pub mod registry;
pub mod robustness;
pub mod scalar;
pub mod simulator;
pub mod stacking;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Design = estimator::FeDesign<f64>;
pub type Design32 = estimator::FeDesign<f32>;
pub type Fit = estimator::FeFit<f64>;
pub type Fit32 = estimator::FeFit<f32>;
pub type PropensityModel = matching::LogitModel<f64>;
