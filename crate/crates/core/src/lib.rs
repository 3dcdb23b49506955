//! Masked-reconstruction anomaly detection for spinal-cord-like images.
//!
//! The pipeline: generate or load cases, pretrain a masked autoencoder on
//! healthy anatomy, adapt it on the target set with uncertainty-guided
//! masking, then score anomalies from reconstruction error.
//!
//! All numeric modules are generic over [`Scalar`] (f32 or f64); production
//! code runs f32 (matching the on-disk raster format), oracles and gradient
//! checks run f64.

pub mod detection;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod patching;
pub mod uncertainty;
pub mod phantom;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Raster of pixels or map values.
pub type Raster<T> = ndarray::Array2<T>;
/// Binary or label mask raster.
pub type Mask = ndarray::Array2<u8>;

/// Working image type used by the CLI and on disk.
pub type Image32 = Raster<f32>;
/// High-precision image type used by oracles and gradient checks.
pub type Image64 = Raster<f64>;
pub type Case32 = phantom::CaseRecord<f32>;
pub type Case64 = phantom::CaseRecord<f64>;
