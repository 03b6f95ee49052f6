//! Robustness-aware mixed-precision quantization.
//!
//! The crate bundles a small dense-tensor network engine, fake quantization
//! with KL-calibrated clip ranges, BitOPs accounting, randomized-smoothing
//! certification (full and incremental), a DDPG agent and the search loop
//! that ties them together.

pub mod certify;
pub mod cost;
pub mod data;
pub mod ddpg;
pub mod error;
pub mod format;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Artifact version reported by the CLI.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
