//! Parameter blocks and their canonical naming.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Parts of a transformer block that can be inherited independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Submodule {
    Attention,
    Mlp,
    #[serde(rename = "layernorm")]
    LayerNorm,
}

impl Submodule {
    pub const ALL: [Submodule; 3] = [Submodule::Attention, Submodule::Mlp, Submodule::LayerNorm];

    pub fn all() -> BTreeSet<Submodule> {
        Self::ALL.into_iter().collect()
    }
}

impl fmt::Display for Submodule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Submodule::Attention => "attention",
            Submodule::Mlp => "mlp",
            Submodule::LayerNorm => "layernorm",
        })
    }
}

impl FromStr for Submodule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" | "attn" => Ok(Submodule::Attention),
            "mlp" => Ok(Submodule::Mlp),
            "layernorm" | "norm" | "ln" => Ok(Submodule::LayerNorm),
            other => Err(format!("unknown submodule `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    /// Output projection, `e × e`; row block `h·d..(h+1)·d` reads head `h`.
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_1: Norm,
    pub attn: Attention,
    pub ln_2: Norm,
    pub mlp: Mlp,
}

/// All parameters of a model. Embedding and head are untied.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Token embedding, `V × e`.
    pub wte: Tensor,
    /// Learned positions, `T_max × e`.
    pub wpe: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    /// LM head, `e × V`.
    pub head: Tensor,
}

impl Norm {
    pub fn tensors(&self) -> [(&'static str, &Tensor); 2] {
        [("gamma", &self.gamma), ("beta", &self.beta)]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 2] {
        [("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

impl Attention {
    pub fn tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ]
    }
}

impl Mlp {
    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
        ]
    }
}

impl Block {
    /// `(submodule, name-within-block, tensor)` in canonical order.
    pub fn tensors(&self) -> Vec<(Submodule, String, &Tensor)> {
        let mut out = Vec::with_capacity(16);
        for (n, t) in self.ln_1.tensors() {
            out.push((Submodule::LayerNorm, format!("ln_1.{n}"), t));
        }
        for (n, t) in self.attn.tensors() {
            out.push((Submodule::Attention, format!("attn.{n}"), t));
        }
        for (n, t) in self.ln_2.tensors() {
            out.push((Submodule::LayerNorm, format!("ln_2.{n}"), t));
        }
        for (n, t) in self.mlp.tensors() {
            out.push((Submodule::Mlp, format!("mlp.{n}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(Submodule, String, &mut Tensor)> {
        let mut out = Vec::with_capacity(16);
        for (n, t) in self.ln_1.tensors_mut() {
            out.push((Submodule::LayerNorm, format!("ln_1.{n}"), t));
        }
        for (n, t) in self.attn.tensors_mut() {
            out.push((Submodule::Attention, format!("attn.{n}"), t));
        }
        for (n, t) in self.ln_2.tensors_mut() {
            out.push((Submodule::LayerNorm, format!("ln_2.{n}"), t));
        }
        for (n, t) in self.mlp.tensors_mut() {
            out.push((Submodule::Mlp, format!("mlp.{n}"), t));
        }
        out
    }

    /// SHA-256 over the block's payload in canonical order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, _, t) in self.tensors() {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Freshly initialized block for a model with `n_layers` layers.
    pub fn random(config: &ModelConfig, layer: usize, seed: u64) -> Self {
        let e = config.hidden;
        let f = config.mlp_hidden();
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let w = |name: &str, r: usize, c: usize, std: f64| normal_tensor(&[r, c], std, seed, &format!("h.{layer}.{name}"));
        Block {
            ln_1: Norm::identity(e),
            attn: Attention {
                w_q: w("attn.w_q", e, e, INIT_STD),
                b_q: Tensor::zeros(&[e]),
                w_k: w("attn.w_k", e, e, INIT_STD),
                b_k: Tensor::zeros(&[e]),
                w_v: w("attn.w_v", e, e, INIT_STD),
                b_v: Tensor::zeros(&[e]),
                w_o: w("attn.w_o", e, e, resid_std),
                b_o: Tensor::zeros(&[e]),
            },
            ln_2: Norm::identity(e),
            mlp: Mlp {
                w_fc: w("mlp.w_fc", e, f, INIT_STD),
                b_fc: Tensor::zeros(&[f]),
                w_proj: w("mlp.w_proj", f, e, resid_std),
                b_proj: Tensor::zeros(&[e]),
            },
        }
    }
}

impl Block {
    pub(crate) fn zeros(config: &ModelConfig) -> Self {
        let e = config.hidden;
        let f = config.mlp_hidden();
        let z = |s: &[usize]| Tensor::zeros(s);
        let norm = || Norm { gamma: z(&[e]), beta: z(&[e]) };
        Block {
            ln_1: norm(),
            attn: Attention {
                w_q: z(&[e, e]),
                b_q: z(&[e]),
                w_k: z(&[e, e]),
                b_k: z(&[e]),
                w_v: z(&[e, e]),
                b_v: z(&[e]),
                w_o: z(&[e, e]),
                b_o: z(&[e]),
            },
            ln_2: norm(),
            mlp: Mlp {
                w_fc: z(&[e, f]),
                b_fc: z(&[f]),
                w_proj: z(&[f, e]),
                b_proj: z(&[e]),
            },
        }
    }
}

impl Norm {
    pub fn identity(e: usize) -> Self {
        Norm {
            gamma: Tensor::filled(&[e], 1.0),
            beta: Tensor::zeros(&[e]),
        }
    }
}

/// Normal(0, std) tensor whose stream depends only on `(seed, name)`.
pub(crate) fn normal_tensor(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Weights {
    /// Scaled-normal initialization: std 0.02, residual projections scaled by
    /// `1/sqrt(2L)`, zero biases, unit norms.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let e = config.hidden;
        Weights {
            wte: normal_tensor(&[config.vocab, e], INIT_STD, seed, "wte"),
            wpe: normal_tensor(&[config.context, e], INIT_STD, seed, "wpe"),
            blocks: (0..config.n_layers).map(|l| Block::random(config, l, seed)).collect(),
            ln_f: Norm::identity(e),
            head: normal_tensor(&[e, config.vocab], INIT_STD, seed, "head"),
        }
    }

    /// All-zero weights with the shapes of `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let e = config.hidden;
        Weights {
            wte: Tensor::zeros(&[config.vocab, e]),
            wpe: Tensor::zeros(&[config.context, e]),
            blocks: (0..config.n_layers).map(|_| Block::zeros(config)).collect(),
            ln_f: Norm {
                gamma: Tensor::zeros(&[e]),
                beta: Tensor::zeros(&[e]),
            },
            head: Tensor::zeros(&[e, config.vocab]),
        }
    }

    /// Every tensor with its canonical name, in payload order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (_, n, t) in b.tensors() {
                out.push((format!("h.{l}.{n}"), t));
            }
        }
        for (n, t) in self.ln_f.tensors() {
            out.push((format!("ln_f.{n}"), t));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("wte".to_string(), &mut self.wte), ("wpe".to_string(), &mut self.wpe)];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (_, n, t) in b.tensors_mut() {
                out.push((format!("h.{l}.{n}"), t));
            }
        }
        for (n, t) in self.ln_f.tensors_mut() {
            out.push((format!("ln_f.{n}"), t));
        }
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Checks every tensor shape against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = expected_shapes(config);
        let named = self.named();
        if named.len() != expected.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} tensors for a config expecting {}",
                named.len(),
                expected.len()
            )));
        }
        for ((name, t), (ename, shape)) in named.iter().zip(&expected) {
            if name != ename || t.shape() != shape.as_slice() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, expected {ename} {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Canonical `(name, shape)` list for a config.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = config.hidden;
    let f = config.mlp_hidden();
    let mut out = vec![
        ("wte".to_string(), vec![config.vocab, e]),
        ("wpe".to_string(), vec![config.context, e]),
    ];
    for l in 0..config.n_layers {
        let p = |n: &str| format!("h.{l}.{n}");
        out.push((p("ln_1.gamma"), vec![e]));
        out.push((p("ln_1.beta"), vec![e]));
        for w in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.w_{w}")), vec![e, e]));
            out.push((p(&format!("attn.b_{w}")), vec![e]));
        }
        out.push((p("ln_2.gamma"), vec![e]));
        out.push((p("ln_2.beta"), vec![e]));
        out.push((p("mlp.w_fc"), vec![e, f]));
        out.push((p("mlp.b_fc"), vec![f]));
        out.push((p("mlp.w_proj"), vec![f, e]));
        out.push((p("mlp.b_proj"), vec![e]));
    }
    out.push(("ln_f.gamma".to_string(), vec![e]));
    out.push(("ln_f.beta".to_string(), vec![e]));
    out.push(("head".to_string(), vec![e, config.vocab]));
    out
}
