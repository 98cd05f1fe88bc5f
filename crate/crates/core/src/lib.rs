//! Whole-image regression with small fully-convolutional networks.
//!
//! A classification-style stack of convolution blocks, with the fully
//! connected head replaced by a per-pixel combiner and sigmoid, is trained to
//! map an image to a continuous feature map. The crate covers the layers and
//! their hand-written backward passes, target synthesis, L-BFGS training,
//! window retrieval from heatmaps, saliency metrics, a finite-difference
//! gradient checker and the on-disk formats.

pub mod error;
pub mod gradcheck;
pub mod groundtruth;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod retrieval;
pub mod tensor;

pub use error::{Error, Result};
pub use groundtruth::{Sample, TargetSource, Window};
pub use layers::{CombineMode, CombinerParams, LrnParams};
pub use network::{BlockSpec, LossConfig, Network, NetworkSpec};
pub use tensor::{FilterBank, Tensor};
