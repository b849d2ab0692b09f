//! Pipeline around `mvmcad-core`: netpbm and tensor file formats, synthetic
//! multi-view datasets, checkpoints, training, evaluation and inference.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod error;
pub mod eval;
pub mod infer;
pub mod mvtn;
pub mod netpbm;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
