//! Small moving-target detection from paired RGB and infrared video.
//!
//! The pipeline fuses the two streams, suppresses static background with
//! dense optical flow, partitions the result into superpixels, and scores the
//! superpixel graph with a residual split-attention graph network topped by a
//! graph feature pyramid. The highest-scoring region yields one box per frame.

pub mod cli;
pub mod detection;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod grsan;
pub mod image;
pub mod model;
pub mod pyramid;
pub mod segmentation;
pub mod training;

pub use error::{Error, Result};
