//! Sink-collapse certificates and numerical checks of the collapse bounds:
//! the rank-1 defect bound, the softmax Jacobian bound, and the
//! query/key gradient bounds of a single attention head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{singular_values, spectral_norm, symmetric_eigenvalues};
use crate::tensor::{Graph, Tensor, TensorError};

/// Row sums must be within this of 1.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-6;
/// Slack on the rank-1 defect bound.
pub const RANK1_SLACK: f64 = 1e-9;
/// Slack on the Jacobian chain and the gradient bounds.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("row {row} sums to {sum} (or has negative or non-finite entries)")]
    NotStochastic { row: usize, sum: f64 },
    #[error("matrix of {len} values is not {t}x{t}")]
    Shape { len: usize, t: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseCertificate {
    /// Sink column, 0-based.
    pub j_star: usize,
    pub epsilon: f64,
    #[serde(rename = "T")]
    pub t: usize,
    /// ‖A − 1 e_{j*}ᵀ‖_F.
    pub frobenius_defect: f64,
    pub sigma2: f64,
    /// ε √(2T).
    pub bound: f64,
    /// Fraction of rows whose argmax is `j_star`.
    pub argmax_agreement: f64,
}

fn check_stochastic(a: &[f64], t: usize) -> Result<(), TheoryError> {
    if t == 0 || a.len() != t * t {
        return Err(TheoryError::Shape { len: a.len(), t });
    }
    for (row, r) in a.chunks_exact(t).enumerate() {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
            return Err(TheoryError::NotStochastic { row, sum });
        }
    }
    Ok(())
}

/// ε for a fixed sink column: the worst row's mass outside it.
pub fn sink_epsilon(a: &[f64], t: usize, j: usize) -> f64 {
    a.chunks_exact(t).map(|r| 1.0 - r[j]).fold(0.0, f64::max)
}

fn argmax(r: &[f64]) -> usize {
    r.iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > r[best] { j } else { best })
}

/// Picks the sink column minimizing ε (ties: smallest index) and evaluates
/// the rank-1 quantities.
pub fn certify_sink(a: &[f64], t: usize) -> Result<CollapseCertificate, TheoryError> {
    check_stochastic(a, t)?;
    let (j_star, epsilon) = (0..t)
        .map(|j| (j, sink_epsilon(a, t, j)))
        .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
    let frobenius_defect = a
        .chunks_exact(t)
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let d = if j == j_star { v - 1.0 } else { v };
                    d * d
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    let s = singular_values(t, t, a);
    let agree = a.chunks_exact(t).filter(|r| argmax(r) == j_star).count();
    Ok(CollapseCertificate {
        j_star,
        epsilon,
        t,
        frobenius_defect,
        sigma2: s.get(1).copied().unwrap_or(0.0),
        bound: epsilon * (2.0 * t as f64).sqrt(),
        argmax_agreement: agree as f64 / t as f64,
    })
}

/// A certificate together with where the matrix came from and whether the
/// rank-1 bound held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedMatrix {
    pub index: usize,
    pub seq: Option<usize>,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub certificate: CollapseCertificate,
    pub holds: bool,
}

/// Certifies and checks one matrix.
pub fn certify_and_check(a: &[f64], t: usize, index: usize, coords: Option<(usize, usize, usize)>) -> Result<CertifiedMatrix, TheoryError> {
    let certificate = certify_sink(a, t)?;
    let check = verify_rank1_bound(a, t, &certificate)?;
    Ok(CertifiedMatrix {
        index,
        seq: coords.map(|c| c.0),
        layer: coords.map(|c| c.1),
        head: coords.map(|c| c.2),
        certificate,
        holds: check.holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rank1Check {
    pub frobenius_defect: f64,
    pub sigma2: f64,
    pub bound: f64,
    pub holds: bool,
}

/// σ₂(A) ≤ ‖A − A₀‖_F ≤ ε√(2T), recomputed from `a` for the certificate's sink.
pub fn verify_rank1_bound(a: &[f64], t: usize, cert: &CollapseCertificate) -> Result<Rank1Check, TheoryError> {
    check_stochastic(a, t)?;
    let mut d = a.to_vec();
    for r in d.chunks_exact_mut(t) {
        r[cert.j_star] -= 1.0;
    }
    let frobenius_defect = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sigma2 = singular_values(t, t, a).get(1).copied().unwrap_or(0.0);
    let bound = sink_epsilon(a, t, cert.j_star) * (2.0 * t as f64).sqrt();
    Ok(Rank1Check {
        frobenius_defect,
        sigma2,
        bound,
        holds: sigma2 <= frobenius_defect + RANK1_SLACK && frobenius_defect <= bound + RANK1_SLACK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheck {
    /// ‖diag(a) − a aᵀ‖₂.
    pub norm: f64,
    /// 1 − ‖a‖₂².
    pub trace_bound: f64,
    /// 2(1 − max a).
    pub two_eps: f64,
    pub holds: bool,
}

pub fn softmax_jacobian(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut j = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            j[r * n + c] = if r == c { a[r] } else { 0.0 } - a[r] * a[c];
        }
    }
    j
}

pub fn softmax_jacobian_norm(a: &[f64]) -> JacobianCheck {
    let n = a.len();
    let ev = symmetric_eigenvalues(n, &softmax_jacobian(a));
    let norm = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let trace_bound = 1.0 - a.iter().map(|v| v * v).sum::<f64>();
    let two_eps = 2.0 * (1.0 - a.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    JacobianCheck {
        norm,
        trace_bound,
        two_eps,
        holds: norm <= trace_bound + BOUND_SLACK && trace_bound <= two_eps + BOUND_SLACK,
    }
}

/// One causal attention head with a linear read-out:
/// `L = Σ (softmax(mask(X W_Q (X W_K)ᵀ / √d)) X W_V) ⊙ R`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadInstance {
    pub x: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub r: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    /// Largest per-row off-argmax mass of A.
    pub epsilon: f64,
    pub loss: f64,
    pub grad_wq: f64,
    pub grad_wk: f64,
    pub bound_wq: f64,
    pub bound_wk: f64,
    pub x_norm: f64,
    pub q_norm: f64,
    pub k_norm: f64,
    pub grad_a: f64,
    pub holds: bool,
}

pub struct HeadGradients {
    pub attention: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub loss: f64,
    pub grad_a: Tensor,
    pub grad_wq: Tensor,
    pub grad_wk: Tensor,
}

fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t <= i / t).collect()
}

impl HeadInstance {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.x.shape();
        (s[0], s[1])
    }

    pub fn loss(&self) -> Result<f64, TheoryError> {
        Ok(self.gradients()?.loss)
    }

    pub fn gradients(&self) -> Result<HeadGradients, TheoryError> {
        let (t, d) = self.dims();
        let mut g = Graph::new();
        let x = g.constant(self.x.clone());
        let wq = g.param(self.w_q.clone());
        let wk = g.param(self.w_k.clone());
        let wv = g.param(self.w_v.clone());
        let r = g.constant(self.r.clone());
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let s = g.matmul_t(q, k)?;
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let a = g.softmax_rows(s, Some(&causal_mask(t)))?;
        let o = g.matmul(a, v)?;
        let prod = g.mul(o, r)?;
        let loss = g.sum(prod);
        g.backward(loss)?;
        let grad = |v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
        Ok(HeadGradients {
            attention: g.value(a).clone(),
            q: g.value(q).clone(),
            k: g.value(k).clone(),
            loss: g.value(loss).data()[0],
            grad_a: grad(a),
            grad_wq: grad(wq),
            grad_wk: grad(wk),
        })
    }
}

/// Checks ‖∂L/∂W_Q‖_F ≤ (2ε/√d)‖X‖₂‖K‖₂‖∂L/∂A‖_F and the W_K analogue with ‖Q‖₂.
pub fn verify_gradient_bounds(inst: &HeadInstance) -> Result<GradientCheck, TheoryError> {
    let (t, d) = inst.dims();
    let gr = inst.gradients()?;
    let epsilon = gr
        .attention
        .data()
        .chunks_exact(t)
        .map(|row| 1.0 - row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .fold(0.0, f64::max);
    let x_norm = spectral_norm(t, d, inst.x.data());
    let q_norm = spectral_norm(t, d, gr.q.data());
    let k_norm = spectral_norm(t, d, gr.k.data());
    let grad_a = gr.grad_a.frobenius_norm();
    let c = 2.0 * epsilon / (d as f64).sqrt() * x_norm * grad_a;
    let (bound_wq, bound_wk) = (c * k_norm, c * q_norm);
    let grad_wq = gr.grad_wq.frobenius_norm();
    let grad_wk = gr.grad_wk.frobenius_norm();
    let slack = |b: f64| b * (1.0 + 1e-9) + BOUND_SLACK;
    Ok(GradientCheck {
        t,
        d,
        epsilon,
        loss: gr.loss,
        grad_wq,
        grad_wk,
        bound_wq,
        bound_wk,
        x_norm,
        q_norm,
        k_norm,
        grad_a,
        holds: grad_wq <= slack(bound_wq) && grad_wk <= slack(bound_wk),
    })
}

fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = Normal::new(0.0, std).expect("valid std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("shape")
}

/// Random Gaussian head; `logit_scale` multiplies W_Q and so sharpens the softmax.
pub fn random_head(rng: &mut impl Rng, t: usize, d: usize, logit_scale: f64) -> HeadInstance {
    let mut w_q = normal_tensor(rng, d, d, 1.0);
    w_q.data_mut().iter_mut().for_each(|v| *v *= logit_scale);
    HeadInstance {
        x: normal_tensor(rng, t, d, 1.0),
        w_q,
        w_k: normal_tensor(rng, d, d, 1.0),
        w_v: normal_tensor(rng, d, d, 1.0),
        r: normal_tensor(rng, t, d, 1.0),
    }
}

/// A head whose every row attends to token 0 with probability exactly 1:
/// token 0's key dominates all scores by far more than the exp underflow range.
pub fn one_hot_head(rng: &mut impl Rng, t: usize, d: usize) -> HeadInstance {
    let mut x = normal_tensor(rng, t, d, 0.1);
    let big = 4000.0 * (d as f64).sqrt();
    for i in 0..t {
        x.data_mut()[i * d] = if i == 0 { big } else { 1.0 };
    }
    let eye = Tensor::identity(d);
    HeadInstance {
        x,
        w_q: eye.clone(),
        w_k: eye,
        w_v: normal_tensor(rng, d, d, 1.0),
        r: normal_tensor(rng, t, d, 1.0),
    }
}

/// Random row-stochastic `t × t` matrix drawn from a mix of regimes: causal
/// softmax at random sharpness, sink-biased causal softmax, and dense rows.
pub fn random_stochastic(rng: &mut impl Rng, t: usize) -> Vec<f64> {
    let kind = rng.random_range(0..3);
    let scale = 10f64.powf(rng.random_range(-1.0..1.5));
    let sink_boost = if kind == 1 { rng.random_range(0.0..12.0) } else { 0.0 };
    let causal = kind != 2;
    let n = Normal::new(0.0, scale).expect("valid std");
    let mut a = vec![0.0; t * t];
    for i in 0..t {
        let row = &mut a[i * t..(i + 1) * t];
        let width = if causal { i + 1 } else { t };
        let logits: Vec<f64> = (0..width).map(|j| n.sample(rng) + if j == 0 { sink_boost } else { 0.0 }).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            row[j] = (l - mx).exp() / z;
        }
    }
    a
}

/// Random probability vector of length `n` with random sharpness.
pub fn random_probability_row(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.random_range(-1.0..1.5));
    let dist = Normal::new(0.0, scale).expect("valid std");
    let logits: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
