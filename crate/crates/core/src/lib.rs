//! Calibration-aware training for VAE classifiers.
//!
//! The numeric core (`diffcore`, `model`, `losses`, `metrics`,
//! `uncertainty`) is generic over [`Scalar`]; data handling and the
//! experiment harness run in `f64`.

pub mod dataset;
pub mod diffcore;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod uncertainty;

pub use scalar::Scalar;

pub type Matrix64 = diffcore::Matrix<f64>;
pub type Matrix32 = diffcore::Matrix<f32>;
pub type Tape64 = diffcore::Tape<f64>;
pub type Tape32 = diffcore::Tape<f32>;
pub type VaeClassifier64 = model::VaeClassifier<f64>;
pub type VaeClassifier32 = model::VaeClassifier<f32>;
pub type Record64 = metrics::PredictionRecord<f64>;
pub type Record32 = metrics::PredictionRecord<f32>;
