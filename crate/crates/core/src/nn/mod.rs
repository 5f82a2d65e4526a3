//! Differentiable numerical kernels and the optimizer.
//!
//! Gradients are verified against finite differences in [`gradcheck`].

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
mod params;
mod real;
mod tape;
mod tensor;

pub use params::{AdamConfig, ParamGrads, ParamId, ParameterStore};
pub use real::{DType, Real};
pub use tape::{sigmoid, AttentionBlock, Gradients, Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::{LumError, Result};

/// Transformer shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_hidden_dim: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.num_layers == 0 || self.mlp_hidden_dim == 0
        {
            return Err(LumError::InvalidConfig(
                "attention dimensions must be positive".into(),
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(LumError::InvalidConfig(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}
