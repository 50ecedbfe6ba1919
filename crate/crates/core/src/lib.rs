//! Calibration-aware text classification at desk scale.
//!
//! The toolkit trains a small hashed n-gram classifier whose labels live as
//! unit vectors spread uniformly on a hypersphere, and whose training loss
//! rebalances samples by accuracy and uncertainty. Alongside the model it
//! ships the usual calibration baselines (temperature scaling, label
//! smoothing, an accuracy-versus-uncertainty loss, an optional KL term
//! against empirical posteriors) and the metrics to compare them: classwise
//! and standard expected calibration error, reliability-diagram data, and
//! macro classification scores.
//!
//! The numeric core (`numerics`, `sphere`, `losses`, `evaluation`) is generic
//! over the scalar type; the model, data, and trainer layers run on the
//! concrete [`Real`] aliases below.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sphere;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Scalar};

/// Default scalar used by the model, trainer, and CLI layers.
pub type Real = f64;

/// Dense matrix over the default scalar.
pub type Mat = numerics::Matrix<Real>;

/// Hyperspherical label frame over the default scalar.
pub type Frame = sphere::FrameMatrix<Real>;

/// Gradient-check report over the default scalar.
pub type GradCheck = numerics::GradCheckResult<Real>;
