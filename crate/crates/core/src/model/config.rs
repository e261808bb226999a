use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture of a pre-LN decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    /// Maximum sequence length (rows of the positional table).
    pub context: usize,
    pub vocab: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, hidden: usize, context: usize, vocab: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            hidden,
            context,
            vocab,
            norm_eps: default_eps(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_layers(&self, n_layers: usize) -> Self {
        Self {
            n_layers,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads.max(1)
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers < 1 {
            return fail("n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || self.hidden == 0 || self.hidden % self.n_heads != 0 {
            return fail(format!(
                "hidden {} must be a positive multiple of n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if self.context < 2 {
            return fail(format!("context {} must be >= 2", self.context));
        }
        if self.vocab < 2 {
            return fail(format!("vocab {} must be >= 2", self.vocab));
        }
        if !(self.norm_eps > 0.0) {
            return fail(format!("norm_eps {} must be > 0", self.norm_eps));
        }
        Ok(())
    }

    /// Trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let e = self.hidden;
        let per_layer = 4 * e + 4 * (e * e + e) + (e * 4 * e + 4 * e) + (4 * e * e + e);
        self.vocab * e * 2 + self.context * e + self.n_layers * per_layer + 2 * e
    }
}
