use super::{ModelCheckpoint, ModelConfig, ModelError, Weights};
use crate::data::Batch;
use crate::tensor::{Graph, Tensor, Var};

/// Per-(layer, head) causal attention matrices of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    /// `[layer][head][T][T]`, row-major.
    pub data: Vec<f64>,
}

impl AttentionCapture {
    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let tt = self.seq_len * self.seq_len;
        let i = layer * self.n_heads + head;
        &self.data[i * tt..(i + 1) * tt]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T × V` for a single sequence, `(B·T) × V` for a batch.
    pub logits: Tensor,
    /// One capture per sequence when requested.
    pub attention: Option<Vec<AttentionCapture>>,
}

const PER_BLOCK: usize = 16;

/// Canonical positions of block tensors inside the bound parameter list.
mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_Q: usize = 2;
    pub const B_Q: usize = 3;
    pub const W_K: usize = 4;
    pub const B_K: usize = 5;
    pub const W_V: usize = 6;
    pub const B_V: usize = 7;
    pub const W_O: usize = 8;
    pub const B_O: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W_FC: usize = 12;
    pub const B_FC: usize = 13;
    pub const W_PROJ: usize = 14;
    pub const B_PROJ: usize = 15;
}

/// Moves every tensor of `weights` into `g` as a trainable leaf, in canonical
/// order. [`unbind`] moves them back.
pub(crate) fn bind_owned(g: &mut Graph, weights: &mut Weights) -> Vec<Var> {
    weights
        .named_mut()
        .into_iter()
        .map(|(_, t)| g.param(std::mem::take(t)))
        .collect()
}

pub(crate) fn unbind(g: &mut Graph, vars: &[Var], weights: &mut Weights) {
    for ((_, t), v) in weights.named_mut().into_iter().zip(vars) {
        *t = g.take_value(*v);
    }
}

fn bind_const(g: &mut Graph, weights: &Weights) -> Vec<Var> {
    weights.named().into_iter().map(|(_, t)| g.constant(t.clone())).collect()
}

/// Builds the forward graph; returns the logits node and one attention node per layer.
pub(crate) fn build_logits(
    g: &mut Graph,
    vars: &[Var],
    cfg: &ModelConfig,
    ids: &[usize],
    batch: usize,
    seq_len: usize,
) -> Result<(Var, Vec<Var>), ModelError> {
    let n_layers = (vars.len() - 5) / PER_BLOCK;
    let eps = cfg.norm_eps;
    let mut x = g.embedding(vars[0], vars[1], ids, seq_len)?;
    let mut attn_nodes = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let p = |s: usize| vars[2 + l * PER_BLOCK + s];
        let h = g.layer_norm(x, p(slot::LN1_G), p(slot::LN1_B), eps)?;
        let q = g.matmul(h, p(slot::W_Q))?;
        let q = g.add_row_broadcast(q, p(slot::B_Q))?;
        let k = g.matmul(h, p(slot::W_K))?;
        let k = g.add_row_broadcast(k, p(slot::B_K))?;
        let v = g.matmul(h, p(slot::W_V))?;
        let v = g.add_row_broadcast(v, p(slot::B_V))?;
        let a = g.causal_attention(q, k, v, batch, seq_len, cfg.n_heads)?;
        attn_nodes.push(a);
        let o = g.matmul(a, p(slot::W_O))?;
        let o = g.add_row_broadcast(o, p(slot::B_O))?;
        x = g.add(x, o)?;
        let h2 = g.layer_norm(x, p(slot::LN2_G), p(slot::LN2_B), eps)?;
        let f = g.matmul(h2, p(slot::W_FC))?;
        let f = g.add_row_broadcast(f, p(slot::B_FC))?;
        let f = g.gelu(f);
        let f = g.matmul(f, p(slot::W_PROJ))?;
        let f = g.add_row_broadcast(f, p(slot::B_PROJ))?;
        x = g.add(x, f)?;
    }
    let base = 2 + n_layers * PER_BLOCK;
    let h = g.layer_norm(x, vars[base], vars[base + 1], eps)?;
    let logits = g.matmul(h, vars[base + 2])?;
    Ok((logits, attn_nodes))
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32], seq_len: usize) -> Result<Vec<usize>, ModelError> {
    if seq_len == 0 || seq_len > cfg.context {
        return Err(ModelError::SequenceTooLong {
            len: seq_len,
            max: cfg.context,
        });
    }
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < cfg.vocab {
                Ok(t as usize)
            } else {
                Err(ModelError::TokenOutOfVocab { token: t, vocab: cfg.vocab })
            }
        })
        .collect()
}

fn collect_capture(g: &Graph, nodes: &[Var], batch: usize, seq_len: usize, heads: usize) -> Vec<AttentionCapture> {
    let tt = seq_len * seq_len;
    (0..batch)
        .map(|b| {
            let mut data = Vec::with_capacity(nodes.len() * heads * tt);
            for &n in nodes {
                let probs = g.attention_probs(n).expect("attention node");
                data.extend_from_slice(&probs[b * heads * tt..(b + 1) * heads * tt]);
            }
            AttentionCapture {
                n_layers: nodes.len(),
                n_heads: heads,
                seq_len,
                data,
            }
        })
        .collect()
}

/// Forward pass over one sequence.
pub fn forward(ckpt: &ModelCheckpoint, tokens: &[u32], capture: bool) -> Result<ForwardOutput, ModelError> {
    forward_batch(ckpt, tokens, 1, capture)
}

/// Forward pass over `batch` equal-length sequences packed back to back.
pub fn forward_batch(ckpt: &ModelCheckpoint, tokens: &[u32], batch: usize, capture: bool) -> Result<ForwardOutput, ModelError> {
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(ModelError::InvalidConfig(format!("{} tokens do not split into {batch} sequences", tokens.len())));
    }
    let seq_len = tokens.len() / batch;
    let ids = check_tokens(&ckpt.config, tokens, seq_len)?;
    let mut g = Graph::new();
    let vars = bind_const(&mut g, &ckpt.weights);
    let (logits, nodes) = build_logits(&mut g, &vars, &ckpt.config, &ids, batch, seq_len)?;
    let attention = capture.then(|| collect_capture(&g, &nodes, batch, seq_len, ckpt.config.n_heads));
    Ok(ForwardOutput {
        logits: g.take_value(logits),
        attention,
    })
}

/// Mean next-token cross-entropy over `batches`, evaluated in order.
pub fn evaluate_loss(ckpt: &ModelCheckpoint, batches: &[Batch]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for b in batches {
        total += batch_loss(ckpt, b)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

pub(crate) fn batch_loss(ckpt: &ModelCheckpoint, b: &Batch) -> Result<f64, ModelError> {
    let ids = check_tokens(&ckpt.config, &b.inputs, b.seq_len)?;
    let targets: Vec<usize> = b.targets.iter().map(|&t| t as usize).collect();
    let mut g = Graph::new();
    let vars = bind_const(&mut g, &ckpt.weights);
    let (logits, _) = build_logits(&mut g, &vars, &ckpt.config, &ids, b.batch_size, b.seq_len)?;
    let loss = g.cross_entropy(logits, &targets)?;
    Ok(g.value(loss).data()[0])
}
