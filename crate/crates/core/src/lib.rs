//! Volumetric liver segmentation: a deeply supervised 3D fully convolutional
//! network trained from scratch, dense CRF refinement on transverse slices,
//! and surface-distance evaluation.
//!
//! All numerics are `f64`, single-volume, CPU.

pub mod crf;
pub mod error;
pub mod kv;
pub mod labels;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use labels::LabelVolume;
pub use net::{ArchitectureConfig, Eta, LossBreakdown, NetworkParams, ProbMap};
pub use rng::Rng;
pub use tensor::Tensor;
pub use metrics::{Mask, SegMetrics};
pub use volume::Volume;
