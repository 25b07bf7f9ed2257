//! Stationary Gaussian vector sequences whose normalized partial-sum
//! covariances oscillate between prescribed target matrices.
//!
//! The matrix and cosine-series layers are generic over [`scalar::Real`];
//! the aliases below fix the working precision used by the pipeline.

pub mod construction;
pub mod decomposition;
pub mod error;
pub mod fault;
pub mod matrix;
pub mod mixing;
pub mod perturbation;
pub mod report;
pub mod scalar;
pub mod simulation;
pub mod spectral;

pub use error::{Error, Result};
pub use fault::Fault;
pub use scalar::Real;

/// Symmetric matrix at working precision.
pub type Matrix = matrix::SymMatrix<f64>;
/// Cosine series at working precision.
pub type Series = spectral::CosineSeries<f64>;
/// Autocovariance table at working precision.
pub type Autocov = spectral::AutocovarianceTable<f64>;
