//! Numerical core for multi-view anomaly detection by feature reconstruction.
//!
//! Everything here is pure computation over [`Tensor`] values: a small
//! reverse-mode [`Tape`], the pre-encoder prior gate, a seeded frozen
//! transformer backbone, the anomaly amplification module, the reconstruction
//! decoder, the cross-feature loss, anomaly scoring with the usual evaluation
//! metrics, and the StableAdamW optimizer. File formats, datasets and the CLI
//! live in the `mvmcad` crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod aam;
pub mod backbone;
pub mod block;
pub mod cfl;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prior_gate;
pub mod real;
pub mod resample;
pub mod scoring;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
