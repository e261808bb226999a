//! Pre-LN GPT-2-style decoder: weights, forward pass with attention capture,
//! checkpoint surgery, the LLCK file format and the training loop.

mod checkpoint;
mod config;
mod forward;
mod surgery;
pub mod train;
mod weights;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, read_checkpoint_bytes, write_checkpoint, write_checkpoint_bytes, LLCK_MAGIC};
pub use config::ModelConfig;
pub use forward::{evaluate_loss, forward, forward_batch, AttentionCapture, ForwardOutput};
pub use surgery::{extract_layer_range, PartialBlock, PartialCheckpoint};
pub use weights::{expected_shapes, Attention, Block, Mlp, Norm, Submodule, Weights};

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("layer range [{first}, {last}) invalid for a {layers}-layer model")]
    LayerRange { first: usize, last: usize, layers: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint digest mismatch: header {expected}, payload {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub recipe: String,
    pub steps: u64,
    #[serde(default)]
    pub source_digest: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(recipe: impl Into<String>) -> Self {
        Self {
            recipe: recipe.into(),
            ..Self::default()
        }
    }

    pub fn note(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.notes.insert(key.into(), value.to_string());
        self
    }
}

/// Weights plus architecture and provenance; the unit of inheritance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    pub provenance: Provenance,
}

impl ModelCheckpoint {
    pub fn new(config: ModelConfig, weights: Weights, provenance: Provenance) -> Result<Self, ModelError> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self {
            config,
            weights,
            provenance,
        })
    }

    /// Deterministic random initialization.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let config = config.clone().with_seed(seed);
        let weights = Weights::random(&config, seed);
        Ok(Self {
            config,
            weights,
            provenance: Provenance::new("random_init").note("seed", seed),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.blocks.len()
    }

    /// SHA-256 of the LLCK payload (all tensors, canonical order).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.weights.named() {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn layer_digest(&self, layer: usize) -> String {
        self.weights.blocks[layer].digest()
    }
}
