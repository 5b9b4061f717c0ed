//! Sparsity-aware 3D hand mesh inference.
//!
//! The pipeline fuses two edge maps into a sparse input, encodes it with a
//! sparse ResNet, lifts soft-argmax keypoints to per-vertex features and
//! decodes a hand mesh with lightweight spiral convolutions. Weights can be
//! stored and executed in int8.

pub mod backbone;
pub mod bench;
pub mod commands;
pub mod decoder;
pub mod error;
pub mod io;
pub mod lifting;
pub mod metrics;
pub mod pipeline;
pub mod preproc;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use pipeline::{Model, ModelConfig, StageTimings};
