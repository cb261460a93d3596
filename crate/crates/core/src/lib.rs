//! Adaptive label smoothing with self-knowledge distillation.
//!
//! The smoothing weight of every sample (or sequence position) is one minus
//! the normalized entropy of the model's own prediction, and the prior mixed
//! into the hard target is the prediction of the best past checkpoint on a
//! validation set. Around that loss the crate provides the gradient-rescaling
//! analysis, checkpoint registry, a small trainer and calibration metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); calibration is
//! generic over any ordered field, including exact rationals. The aliases
//! below name the concrete instantiations used by the trainer and the CLI.

pub mod calibration;
pub mod error;
pub mod grad_analysis;
pub mod gradcheck;
pub mod losses;
pub mod prob;
pub mod registry;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Logits64 = prob::Logits<f64>;
pub type ProbDist64 = prob::ProbDist<f64>;
pub type Alpha64 = prob::AlphaValue<f64>;
pub type LossBreakdown64 = losses::LossBreakdown<f64>;
pub type GradientReport64 = grad_analysis::GradientReport<f64>;
pub type CalibrationReport64 = calibration::CalibrationReport<f64>;
/// Calibration report in exact rational arithmetic.
pub type ExactCalibrationReport = calibration::CalibrationReport<num_rational::Rational64>;
