//! Bayesian self-supervised representation learning at desk scale.
//!
//! BYOL twin networks are pretrained by sampling the posterior over encoder
//! weights with cyclical SGHMC; the collected snapshots are fine-tuned on
//! labeled subsets and marginalized for classification, calibration and
//! out-of-distribution detection.

pub mod autodiff;
pub mod byol;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod downstream;
pub mod error;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod posterior;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result, TensorError};
