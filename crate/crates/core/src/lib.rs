//! HybridNet: joint monocular depth estimation and semantic segmentation
//! with a shared convolutional features trunk.
//!
//! The crate provides a small reverse-mode differentiation engine over
//! dense 64-bit tensors, the four network blocks (features trunk, global
//! depth, depth refinement, atrous pyramid segmentation head), the hybrid
//! multi-task loss, the depth/segmentation metric suites, a synthetic
//! scene generator with on-disk formats, and a deterministic staged
//! training and tiled evaluation harness.

pub mod autodiff;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod raster;
pub mod error;
pub mod gradsuite;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{ops, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, NormStats, Reduction};
pub use metrics::{ConfusionMatrix, DepthMetricsReport, SegMetricsReport};
pub use net::{HybridNet, HybridOutput, HybridVars, ModelConfig};
pub use raster::{LabelMap, ValidMask};
pub use params::{ParamSet, Parameter};
pub use tensor::Tensor;
