//! Wengert-list reverse mode.
//!
//! Every op appends a node holding its value; `backward` walks the list in
//! reverse. Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grad`]; interior gradients reflect the latest call only.

use super::kernels::{self, View};
use super::{dim_err, Tensor, TensorError};
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast { x: Var, bias: Var },
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows { x: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftTargetKl {
        logits: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
        temperature: f64,
    },
    Embedding {
        table: Var,
        positions: Var,
        ids: Vec<usize>,
        seq_len: usize,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single-owner computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call w.r.t. `v` (accumulated for leaves).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Post-softmax probabilities of a [`Graph::causal_attention`] node,
    /// laid out `[batch][head][T][T]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul_t", format!("{m}x{k} * ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b: true }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(dim_err("add_row_broadcast", format!("bias {} vs width {n}", self.value(bias).len())));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBroadcast { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        par::for_each_chunk_mut(out.data_mut(), 1 << 14, |_, c| {
            for v in c {
                let u = *v;
                *v = 0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh());
            }
        });
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(format!("layer_norm eps {eps} must be > 0")));
        }
        let e = *self.value(x).shape().last().unwrap_or(&0);
        if e == 0 || self.value(gamma).len() != e || self.value(beta).len() != e {
            return Err(dim_err("layer_norm", format!("width {e}, gamma {}, beta {}", self.value(gamma).len(), self.value(beta).len())));
        }
        let xv = self.value(x);
        let rows = xv.len() / e;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * e..(r + 1) * e];
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..e {
                let h = (row[j] - mean) * rs;
                xhat[r * e + j] = h;
                out[r * e + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Row-wise softmax over a 2-D tensor. `mask[i*n+j] == false` excludes the
    /// entry: it is skipped before exponentiation and comes out exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(dim_err("softmax_rows", format!("mask {} vs {m}x{n}", mk.len())));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let row = &xv[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, v) in row.iter().enumerate() {
                if keep(j) {
                    any = true;
                    max = max.max(*v);
                }
            }
            if !any {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::SoftmaxRows { x }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (b, v) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(dim_err("cross_entropy", format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfRange { index: t, limit: v });
        }
        let probs = softmax_plain(self.value(logits).data(), b, v, 1.0);
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            loss += log_sum_exp(row) - row[t];
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// `T² · mean_rows KL(softmax(teacher/T) ‖ softmax(student/T))`; the
    /// teacher side is treated as a constant.
    pub fn soft_target_kl(&mut self, logits: Var, teacher_logits: &Tensor, temperature: f64) -> Result<Var, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::InvalidArgument(format!("temperature {temperature} must be > 0")));
        }
        let (b, v) = self.value(logits).dims2()?;
        if teacher_logits.shape() != [b, v] {
            return Err(dim_err("soft_target_kl", format!("student {b}x{v} vs teacher {:?}", teacher_logits.shape())));
        }
        let sl = self.value(logits).data();
        let tl = teacher_logits.data();
        let mut kl = 0.0;
        let mut srow = vec![0.0; v];
        let mut trow = vec![0.0; v];
        for r in 0..b {
            for j in 0..v {
                srow[j] = sl[r * v + j] / temperature;
                trow[j] = tl[r * v + j] / temperature;
            }
            let ls = log_sum_exp(&srow);
            let lt = log_sum_exp(&trow);
            for j in 0..v {
                let log_p = trow[j] - lt;
                let p = log_p.exp();
                if p > 0.0 {
                    kl += p * (log_p - (srow[j] - ls));
                }
            }
        }
        let loss = temperature * temperature * kl / b as f64;
        let student_probs = softmax_plain(sl, b, v, temperature);
        let teacher_probs = softmax_plain(tl, b, v, temperature);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftTargetKl { logits, teacher_probs, student_probs, temperature },
            rg,
        ))
    }

    /// `out[r] = table[ids[r]] + positions[r % seq_len]`.
    pub fn embedding(&mut self, table: Var, positions: Var, ids: &[usize], seq_len: usize) -> Result<Var, TensorError> {
        let (vocab, e) = self.value(table).dims2()?;
        let (tmax, e2) = self.value(positions).dims2()?;
        if e != e2 || seq_len == 0 || seq_len > tmax || ids.len() % seq_len != 0 {
            return Err(dim_err("embedding", format!("table {vocab}x{e}, positions {tmax}x{e2}, {} ids, seq_len {seq_len}", ids.len())));
        }
        if let Some(&t) = ids.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange { index: t, limit: vocab });
        }
        let tv = self.value(table).data();
        let pv = self.value(positions).data();
        let mut out = vec![0.0; ids.len() * e];
        for (r, &id) in ids.iter().enumerate() {
            let p = r % seq_len;
            for j in 0..e {
                out[r * e + j] = tv[id * e + j] + pv[p * e + j];
            }
        }
        let rg = self.rg(table) || self.rg(positions);
        let value = Tensor::new(vec![ids.len(), e], out)?;
        Ok(self.push(value, Op::Embedding { table, positions, ids: ids.to_vec(), seq_len }, rg))
    }

    /// Multi-head causal self-attention on packed `[batch·T, e]` projections.
    /// Head `h` reads columns `h·d..(h+1)·d` with `d = e / heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq_len: usize, heads: usize) -> Result<Var, TensorError> {
        let (rows, e) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, e] {
                return Err(dim_err("causal_attention", "q, k, v shapes differ"));
            }
        }
        if heads == 0 || e % heads != 0 || rows != batch * seq_len {
            return Err(dim_err("causal_attention", format!("{rows}x{e} with batch {batch}, T {seq_len}, heads {heads}")));
        }
        let d = e / heads;
        let t = seq_len;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let parts = par::map_indexed(batch, |b| {
            let base = b * t * e;
            let mut out = vec![0.0; t * e];
            let mut probs = vec![0.0; heads * t * t];
            for h in 0..heads {
                let p = &mut probs[h * t * t..(h + 1) * t * t];
                let off = base + h * d;
                kernels::gemm_view(t, d, t, scale, View::row_major(qd, off, e), View::row_major(kd, off, e).t(), 0.0, p, 0, t);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let max = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row[..=i].iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in row[..=i].iter_mut() {
                        *x /= z;
                    }
                    row[i + 1..].fill(0.0);
                }
                kernels::gemm_view(t, t, d, 1.0, View::row_major(p, 0, t), View::row_major(vd, off, e), 0.0, &mut out, h * d, e);
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(rows * e);
        let mut probs = Vec::with_capacity(batch * heads * t * t);
        for (o, p) in parts {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let value = Tensor::new(vec![rows, e], out)?;
        Ok(self.push(value, Op::CausalAttention { q, k, v, batch, seq_len, heads, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            let shape = node.value.shape().to_vec();
            match (&node.op, node.grad.as_mut()) {
                (Op::Leaf, Some(acc)) => {
                    for (a, x) in acc.data_mut().iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                _ => node.grad = Some(Tensor::new(shape, g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().expect("2-D");
                let n = node.value.shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    // dA = dC · op(B)ᵀ
                    let buf = slot(grads, *a, m * k);
                    kernels::gemm(m, n, k, g, false, bv, !trans_b, buf, true);
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, k * n);
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        kernels::gemm(n, m, k, g, true, av, false, buf, true);
                    } else {
                        // dB = Aᵀ · dC
                        kernels::gemm(k, m, n, av, true, g, false, buf, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.rg(x) {
                        axpy(slot(grads, x, g.len()), 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if self.rg(*b) {
                    axpy(slot(grads, *b, g.len()), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    for ((s, gi), bi) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    for ((s, gi), ai) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                }
            }
            Op::AddRowBroadcast { x, bias } => {
                if self.rg(*x) {
                    axpy(slot(grads, *x, g.len()), 1.0, g);
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let buf = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        for (s, r) in buf.iter_mut().zip(row) {
                            *s += r;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    axpy(slot(grads, *x, g.len()), *c, g);
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    slot(grads, *x, n).iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    for ((s, gi), u) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                        let inner = GELU_C * (u + 0.044715 * u * u * u);
                        let th = inner.tanh();
                        let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
                        let d = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * d_inner;
                        *s += gi * d;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let e = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let buf = slot(grads, *gamma, e);
                    for (grow, hrow) in g.chunks(e).zip(xhat.chunks(e)) {
                        for j in 0..e {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let buf = slot(grads, *beta, e);
                    for grow in g.chunks(e) {
                        for j in 0..e {
                            buf[j] += grow[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let buf = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; e];
                    for (r, ((grow, hrow), brow)) in g.chunks(e).zip(xhat.chunks(e)).zip(buf.chunks_mut(e)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..e {
                            dxhat[j] = grow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= e as f64;
                        mean_dh /= e as f64;
                        for j in 0..e {
                            brow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.rg(*x) {
                    let n = node.value.shape()[1];
                    let y = node.value.data();
                    let buf = slot(grads, *x, g.len());
                    for ((yr, gr), br) in y.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let b = targets.len();
                    let v = probs.len() / b;
                    let c = g[0] / b as f64;
                    let buf = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * v + j] += c * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::SoftTargetKl { logits, teacher_probs, student_probs, temperature } => {
                if self.rg(*logits) {
                    let (b, _) = self.value(*logits).dims2().expect("2-D");
                    let c = g[0] * temperature / b as f64;
                    let buf = slot(grads, *logits, student_probs.len());
                    for ((s, q), p) in buf.iter_mut().zip(student_probs).zip(teacher_probs) {
                        *s += c * (q - p);
                    }
                }
            }
            Op::Embedding { table, positions, ids, seq_len } => {
                let e = node.value.shape()[1];
                if self.rg(*table) {
                    let n = self.value(*table).len();
                    let buf = slot(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            buf[id * e + j] += g[r * e + j];
                        }
                    }
                }
                if self.rg(*positions) {
                    let n = self.value(*positions).len();
                    let buf = slot(grads, *positions, n);
                    for r in 0..ids.len() {
                        let p = r % seq_len;
                        for j in 0..e {
                            buf[p * e + j] += g[r * e + j];
                        }
                    }
                }
            }
            Op::CausalAttention { q, k, v, batch, seq_len, heads, probs } => {
                let (rows, e) = node.value.dims2().expect("2-D");
                let (t, hcount) = (*seq_len, *heads);
                let d = e / hcount;
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let parts = par::map_indexed(*batch, |b| {
                    let base = b * t * e;
                    let mut dq = vec![0.0; t * e];
                    let mut dk = vec![0.0; t * e];
                    let mut dv = vec![0.0; t * e];
                    let mut dp = vec![0.0; t * t];
                    for h in 0..hcount {
                        let p = &probs[(b * hcount + h) * t * t..(b * hcount + h + 1) * t * t];
                        let off = base + h * d;
                        // dP = dO · Vᵀ
                        kernels::gemm_view(t, d, t, 1.0, View::row_major(g, off, e), View::row_major(vd, off, e).t(), 0.0, &mut dp, 0, t);
                        // dV = Pᵀ · dO
                        kernels::gemm_view(t, t, d, 1.0, View::row_major(p, 0, t).t(), View::row_major(g, off, e), 0.0, &mut dv, h * d, e);
                        for i in 0..t {
                            let pr = &p[i * t..(i + 1) * t];
                            let dr = &mut dp[i * t..(i + 1) * t];
                            let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                            dr[i + 1..].fill(0.0);
                        }
                        // dQ = s·dS·K, dK = s·dSᵀ·Q
                        kernels::gemm_view(t, t, d, scale, View::row_major(&dp, 0, t), View::row_major(kd, off, e), 0.0, &mut dq, h * d, e);
                        kernels::gemm_view(t, t, d, scale, View::row_major(&dp, 0, t).t(), View::row_major(qd, off, e), 0.0, &mut dk, h * d, e);
                    }
                    (dq, dk, dv)
                });
                let rq = self.rg(*q);
                let rk = self.rg(*k);
                let rv = self.rg(*v);
                for (b, (dq, dk, dv)) in parts.into_iter().enumerate() {
                    let range = b * t * e..(b + 1) * t * e;
                    if rq {
                        axpy(&mut slot(grads, *q, rows * e)[range.clone()], 1.0, &dq);
                    }
                    if rk {
                        axpy(&mut slot(grads, *k, rows * e)[range.clone()], 1.0, &dk);
                    }
                    if rv {
                        axpy(&mut slot(grads, *v, rows * e)[range], 1.0, &dv);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_plain(x: &[f64], rows: usize, cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for j in 0..cols {
            o[j] = ((row[j] - max) / temperature).exp();
            z += o[j];
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}
