//! Large user model toolkit.
//!
//! The pipeline has three stages:
//!
//! 1. generative pre-training of an autoregressive user model over interleaved
//!    condition/item token streams ([`lum`], fed by [`datagen`] and [`tokenize`]),
//! 2. condition-triggered knowledge querying with group-query masking and a
//!    versioned interest cache ([`query`]),
//! 3. knowledge utilization inside two-tower retrieval and CTR ranking models
//!    ([`dlrm`]).
//!
//! [`nn`] holds the differentiable kernels everything above is built on and
//! [`eval`] the metrics and benchmarks.

pub mod config;
pub mod datagen;
pub mod dlrm;
pub mod error;
pub mod eval;
pub mod lum;
pub mod nn;
pub mod pipeline;
pub mod query;
pub mod tokenize;

pub use error::{LumError, Result};
