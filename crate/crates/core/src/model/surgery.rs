use std::collections::BTreeSet;

use super::{Attention, Block, Mlp, ModelCheckpoint, ModelConfig, ModelError, Norm, Provenance, Submodule, Weights};
use crate::tensor::Tensor;

/// A block with only some of its submodules present.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialBlock {
    pub ln_1: Option<Norm>,
    pub attn: Option<Attention>,
    pub ln_2: Option<Norm>,
    pub mlp: Option<Mlp>,
}

impl PartialBlock {
    pub fn select(block: &Block, submodules: &BTreeSet<Submodule>) -> Self {
        let norms = submodules.contains(&Submodule::LayerNorm);
        PartialBlock {
            ln_1: norms.then(|| block.ln_1.clone()),
            attn: submodules.contains(&Submodule::Attention).then(|| block.attn.clone()),
            ln_2: norms.then(|| block.ln_2.clone()),
            mlp: submodules.contains(&Submodule::Mlp).then(|| block.mlp.clone()),
        }
    }

    /// Fills missing parts from `fallback`.
    pub fn complete(self, fallback: Block) -> Block {
        Block {
            ln_1: self.ln_1.unwrap_or(fallback.ln_1),
            attn: self.attn.unwrap_or(fallback.attn),
            ln_2: self.ln_2.unwrap_or(fallback.ln_2),
            mlp: self.mlp.unwrap_or(fallback.mlp),
        }
    }
}

/// A contiguous layer slice of a checkpoint, restricted to some submodules,
/// plus embeddings, final norm and head.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCheckpoint {
    /// Config of the slice (`n_layers` = slice length).
    pub config: ModelConfig,
    pub source_first: usize,
    pub source_digest: String,
    pub submodules: BTreeSet<Submodule>,
    pub wte: Tensor,
    pub wpe: Tensor,
    pub blocks: Vec<PartialBlock>,
    pub ln_f: Norm,
    pub head: Tensor,
}

impl PartialCheckpoint {
    /// Names of the tensors actually carried, using target layer indices.
    pub fn manifest(&self) -> Vec<String> {
        let mut out = vec!["wte".to_string(), "wpe".to_string()];
        for (l, b) in self.blocks.iter().enumerate() {
            if let Some(n) = &b.ln_1 {
                out.extend(n.tensors().iter().map(|(s, _)| format!("h.{l}.ln_1.{s}")));
            }
            if let Some(a) = &b.attn {
                out.extend(a.tensors().iter().map(|(s, _)| format!("h.{l}.attn.{s}")));
            }
            if let Some(n) = &b.ln_2 {
                out.extend(n.tensors().iter().map(|(s, _)| format!("h.{l}.ln_2.{s}")));
            }
            if let Some(m) = &b.mlp {
                out.extend(m.tensors().iter().map(|(s, _)| format!("h.{l}.mlp.{s}")));
            }
        }
        out.extend(["ln_f.gamma", "ln_f.beta", "head"].map(String::from));
        out
    }

    /// Materializes a full checkpoint; absent submodules get a fresh random
    /// init drawn with `fill_seed`.
    pub fn into_checkpoint(self, fill_seed: u64, provenance: Provenance) -> Result<ModelCheckpoint, ModelError> {
        let config = self.config.clone();
        let blocks = self
            .blocks
            .into_iter()
            .enumerate()
            .map(|(l, b)| b.complete(Block::random(&config, l, fill_seed)))
            .collect();
        let weights = Weights {
            wte: self.wte,
            wpe: self.wpe,
            blocks,
            ln_f: self.ln_f,
            head: self.head,
        };
        ModelCheckpoint::new(config, weights, provenance)
    }
}

/// Copies layers `first..last_exclusive` (only `submodules`) together with
/// embeddings and head.
pub fn extract_layer_range(
    ckpt: &ModelCheckpoint,
    first: usize,
    last_exclusive: usize,
    submodules: &BTreeSet<Submodule>,
) -> Result<PartialCheckpoint, ModelError> {
    let layers = ckpt.n_layers();
    if first >= last_exclusive || last_exclusive > layers {
        return Err(ModelError::LayerRange {
            first,
            last: last_exclusive,
            layers,
        });
    }
    let w = &ckpt.weights;
    Ok(PartialCheckpoint {
        config: ckpt.config.with_layers(last_exclusive - first),
        source_first: first,
        source_digest: ckpt.digest(),
        submodules: submodules.clone(),
        wte: w.wte.clone(),
        wpe: w.wpe.clone(),
        blocks: w.blocks[first..last_exclusive]
            .iter()
            .map(|b| PartialBlock::select(b, submodules))
            .collect(),
        ln_f: w.ln_f.clone(),
        head: w.head.clone(),
    })
}
