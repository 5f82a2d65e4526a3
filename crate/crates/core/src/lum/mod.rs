//! The large user model: token encoder, autoregressive user encoder and
//! next-condition-item contrastive training over packed batches.

mod loss;
mod model;
mod train;

pub use loss::{contrastive_loss, nce_loss, Candidates};
pub use model::{load_checkpoint, save_checkpoint, LumModel};
pub use train::{
    build_sequences, loss_position_accuracy, packed_batch_loss, train, train_with_model,
    StepRecord, TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::nn::AttentionConfig;
use crate::{LumError, Result};

/// Embedding width of every categorical token feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDims {
    pub item_id: usize,
    pub item_category: usize,
    pub popularity: usize,
    pub scenario: usize,
    pub condition_category: usize,
    pub query_terms: usize,
}

impl FieldDims {
    pub fn uniform(dim: usize) -> Self {
        Self {
            item_id: dim,
            item_category: dim,
            popularity: dim,
            scenario: dim,
            condition_category: dim,
            query_terms: dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LumConfig {
    pub attention: AttentionConfig,
    pub field_dims: FieldDims,
    /// Token budget per sequence and per packed row; must be even.
    pub max_sequence_tokens: usize,
    /// Upper bound K on in-batch negatives per positive.
    pub negatives_per_positive: usize,
    /// Temperature of the cosine similarity.
    pub temperature: f64,
    pub learning_rate: f64,
    /// Packed rows per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// When false every condition token is blanked, which turns the model
    /// into a plain next-item predictor.
    pub use_conditions: bool,
    /// When false each sequence gets its own padded row.
    pub pack_sequences: bool,
}

impl Default for LumConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig {
                model_dim: 128,
                num_heads: 4,
                num_layers: 4,
                mlp_hidden_dim: 256,
            },
            field_dims: FieldDims::uniform(32),
            max_sequence_tokens: 256,
            negatives_per_positive: 1024,
            temperature: 0.07,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 5,
            seed: 0,
            use_conditions: true,
            pack_sequences: true,
        }
    }
}

impl LumConfig {
    /// A small configuration that trains in seconds.
    pub fn tiny() -> Self {
        Self {
            attention: AttentionConfig {
                model_dim: 32,
                num_heads: 2,
                num_layers: 2,
                mlp_hidden_dim: 64,
            },
            field_dims: FieldDims::uniform(16),
            max_sequence_tokens: 64,
            batch_size: 4,
            epochs: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.negatives_per_positive == 0 {
            return Err(LumError::InvalidConfig(
                "negatives_per_positive must be >= 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(LumError::InvalidConfig("temperature must be > 0".into()));
        }
        if self.max_sequence_tokens < 2 || self.max_sequence_tokens % 2 != 0 {
            return Err(LumError::InvalidConfig(
                "max_sequence_tokens must be even and >= 2".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(LumError::InvalidConfig("batch_size must be >= 1".into()));
        }
        let d = self.field_dims;
        if [
            d.item_id,
            d.item_category,
            d.popularity,
            d.scenario,
            d.condition_category,
            d.query_terms,
        ]
        .contains(&0)
        {
            return Err(LumError::InvalidConfig("field dims must be >= 1".into()));
        }
        Ok(())
    }
}
