//! Quantitative R2* mapping from multi-gradient-echo magnitude data.
//!
//! This crate holds everything that does not involve the neural network:
//! volumetric containers and the QVOL file format, the magnitude signal
//! model and its derivatives, the voxel-wise Levenberg-Marquardt baseline,
//! synthetic phantom and dataset generation, and evaluation metrics.
//! Estimators are exposed behind the [`estimator::Estimator`] trait and
//! selected by name through an [`estimator::EstimatorRegistry`].

pub mod error;
pub mod volume;
pub mod qvol;
pub mod norm;
pub mod signal;
pub mod nlls;
pub mod phantom;
pub mod dataset;
pub mod metrics;
pub mod render;
pub mod estimator;
pub mod benchmark;
pub mod seed;

pub use error::{Error, Result};
pub use volume::{Dims, EchoStack, FMap, Mask, ParamMap, ScalarVolume, Volume};
pub use norm::NormRecord;
pub use signal::VoxelParams;
pub use nlls::{FitConfig, FitResult};

/// The acquisition grid of the reference protocol: ten echoes, 4 ms apart,
/// starting at 4 ms.
pub fn default_echo_times_ms() -> Vec<f64> {
    (1..=10).map(|n| 4.0 * n as f64).collect()
}
