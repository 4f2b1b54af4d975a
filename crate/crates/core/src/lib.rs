//! Multi-modal salient object detection on top of a frozen promptable
//! segmenter: complementary fusion, per-block multi-modal adapters, automatic
//! semantic and geometric prompts, dual-supervised training and the standard
//! evaluation metrics.

pub mod autograd;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod error;
pub mod foundation;
pub mod madapter;
pub mod mcfm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompt_gen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
