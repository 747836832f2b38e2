//! Zero-shot token labeling from sentence-level classifiers.

pub mod autodiff;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod headscore;
pub mod lime;
pub mod heatmap;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scores;
pub mod softattn;
pub mod tensor;
pub mod train;

pub use error::ModelError;
