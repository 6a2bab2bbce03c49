//! Crack segmentation with a dual CNN/transformer encoder.
//!
//! The CNN path is a bottleneck ResNet, the transformer path stacks
//! overlapping patch embedding, sequence-reduced self-attention and Mix-FFN
//! stages. Both produce five-level pyramids at strides 2..32 that are fused
//! per level and decoded to a full-resolution crack probability map.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod resnet;
pub mod train;
pub mod transformer;

pub use candle_core::{DType, Device};
pub use error::{Error, Result};
