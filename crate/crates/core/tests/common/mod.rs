#![allow(dead_code)]

use lazylayer::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(rng)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so the check
/// covers the whole Jacobian rather than just its column sums.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let w = randn(&mut rng(seed), g.value(out).shape(), 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug)]
pub struct FdReport {
    pub max_rel: f64,
    /// (input, element, autodiff, numeric) of the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Reverse-mode gradients of `f` against central differences with step
/// [`FD_STEP`], over every element of every input.
pub fn fd_check(inputs: &[Tensor], floor: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> FdReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };
    let mut rep = FdReport {
        max_rel: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            let num = (up - down) / (2.0 * FD_STEP);
            let a = grads[i].data()[j];
            let e = rel_err(a, num, floor);
            rep.checked += 1;
            if e > rep.max_rel {
                rep.max_rel = e;
                rep.worst = (i, j, a, num);
            }
        }
    }
    rep
}

use lazylayer::data::Batch;
use lazylayer::model::train::loss_and_grads;
use lazylayer::model::{evaluate_loss, ModelCheckpoint};

/// Loss gradient of the full model against central differences of
/// [`evaluate_loss`], over every parameter.
pub fn model_fd_check(ckpt: &ModelCheckpoint, batch: &Batch, floor: f64) -> FdReport {
    let (_, grads) = loss_and_grads(ckpt, batch, None).unwrap();
    let grads: Vec<Tensor> = grads.named().into_iter().map(|(_, t)| t.clone()).collect();
    let batches = std::slice::from_ref(batch);
    let mut work = ckpt.clone();
    let mut rep = FdReport {
        max_rel: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let n = grads.len();
    for i in 0..n {
        for j in 0..grads[i].len() {
            let x = work.weights.named()[i].1.data()[j];
            let set = |w: &mut ModelCheckpoint, v: f64| w.weights.named_mut()[i].1.data_mut()[j] = v;
            set(&mut work, x + FD_STEP);
            let up = evaluate_loss(&work, batches).unwrap();
            set(&mut work, x - FD_STEP);
            let down = evaluate_loss(&work, batches).unwrap();
            set(&mut work, x);
            let num = (up - down) / (2.0 * FD_STEP);
            let a = grads[i].data()[j];
            let e = rel_err(a, num, floor);
            rep.checked += 1;
            if e > rep.max_rel {
                rep.max_rel = e;
                rep.worst = (i, j, a, num);
            }
        }
    }
    rep
}

/// Replaces every weight with N(0, std²) noise (norm gains around 1) so
/// attention is far from uniform.
pub fn roughen(ckpt: &mut ModelCheckpoint, seed: u64, std: f64) {
    let mut r = rng(seed);
    for (name, t) in ckpt.weights.named_mut() {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        let n = Normal::new(base, std).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut r));
    }
}

/// Random causal softmax matrix: logits N(0, scale²), strict upper triangle zero.
pub fn causal_softmax(r: &mut impl Rng, t: usize, scale: f64) -> Vec<f64> {
    let n = Normal::new(0.0, scale).unwrap();
    let mut a = vec![0.0; t * t];
    for i in 0..t {
        let z: Vec<f64> = (0..=i).map(|_| n.sample(r)).collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        for (j, v) in z.iter().enumerate() {
            a[i * t + j] = (v - mx).exp() / s;
        }
    }
    a
}

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations,
/// sorted descending.
pub fn jacobi_eigenvalues(n: usize, sym: &[f64]) -> Vec<f64> {
    let mut a = sym.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// `AᵀA` of a row-major `rows×cols` matrix.
pub fn gram(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            g[i * cols + j] = (0..rows).map(|k| a[k * cols + i] * a[k * cols + j]).sum();
        }
    }
    g
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by the
/// power method: `squarings` rounds of repeated squaring (so the effective
/// power is `2^squarings`, which also handles nearly equal top eigenvalues),
/// then the Rayleigh quotient of the resulting iterate.
pub fn power_iteration(n: usize, sym: &[f64], squarings: usize) -> f64 {
    let mul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                for j in 0..n {
                    c[i * n + j] += aik * b[k * n + j];
                }
            }
        }
        c
    };
    let mut p = sym.to_vec();
    for _ in 0..squarings {
        p = mul(&p, &p);
        let m = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m == 0.0 {
            return 0.0;
        }
        p.iter_mut().for_each(|v| *v /= m);
    }
    let x: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * i as f64).collect();
    let v: Vec<f64> = (0..n).map(|i| (0..n).map(|j| p[i * n + j] * x[j]).sum()).collect();
    let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| sym[i * n + j] * v[j]).sum()).collect();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    if vv == 0.0 {
        return 0.0;
    }
    v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / vv
}

/// Smallest count whose leading (descending) values reach `ratio` of the sum.
pub fn leading_count(desc: &[f64], ratio: f64) -> usize {
    let total: f64 = desc.iter().sum();
    let mut acc = 0.0;
    for (i, v) in desc.iter().enumerate() {
        acc += v;
        if acc >= (ratio - 1e-12) * total {
            return i + 1;
        }
    }
    desc.len()
}
