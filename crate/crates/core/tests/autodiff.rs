mod common;

use common::{fd_check, randn, rng, weighted_sum};
use lazylayer::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn t(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows)
}

#[test]
fn matmul_examples() {
    let b = t(&[vec![1.0, -2.0, 0.5], vec![3.0, 4.0, 5.0], vec![0.0, 7.0, -1.0]]);
    assert_eq!(Tensor::identity(3).matmul(&b).unwrap(), b);
    let r = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]).matmul(&t(&[vec![0.0], vec![1.0]])).unwrap();
    assert_eq!(r.data(), &[2.0, 4.0]);
    assert!(t(&[vec![1.0, 2.0]]).matmul(&t(&[vec![1.0, 2.0]])).is_err());
}

#[test]
fn matmul_gradient_5x7x3() {
    let mut r = rng(1);
    let ins = [randn(&mut r, &[5, 7], 1.0), randn(&mut r, &[7, 3], 1.0)];
    let rep = fd_check(&ins, 1e-12, |g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, m, 2)
    });
    assert!(rep.max_rel < 1e-6, "{rep:?}");
    assert_eq!(rep.checked, 35 + 21);
}

fn softmax_of(row: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, row.len()], row.to_vec()).unwrap());
    let s = g.softmax_rows(x, None).unwrap();
    g.value(s).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.0, 0.0]), [0.5, 0.5]);
    let s = softmax_of(&[2f64.ln(), 0.0]);
    assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
    let s = softmax_of(&[1000.0, 0.0]);
    assert_eq!(s, [1.0, 0.0]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.softmax_rows(x, Some(&[true, false, false, false])).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[vec![3.0; 4], vec![1.0, -1.0, 1.0, -1.0]]));
    let gamma = g.constant(Tensor::filled(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    let y = g.value(y).data();
    assert!(y[..4].iter().all(|v| *v == 0.0));
    for (a, b) in y[4..].iter().zip([1.0, -1.0, 1.0, -1.0]) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(3);
    let ins = [randn(&mut r, &[4, 6], 1.5), randn(&mut r, &[6], 1.0), randn(&mut r, &[6], 1.0)];
    let rep = fd_check(&ins, 1e-8, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(g, y, 4)
    });
    assert!(rep.max_rel < 1e-6, "{rep:?}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 256]));
    let l = g.cross_entropy(x, &[0, 17, 255]).unwrap();
    assert!((g.value(l).data()[0] - 256f64.ln()).abs() < 1e-12);
    let mut z = Tensor::zeros(&[2, 5]);
    z.data_mut()[1] = 50.0;
    z.data_mut()[5 + 3] = 50.0;
    let x = g.constant(z);
    let l = g.cross_entropy(x, &[1, 3]).unwrap();
    assert!(g.value(l).data()[0] < 1e-9);
    let x = g.constant(Tensor::zeros(&[1, 4]));
    assert!(g.cross_entropy(x, &[4]).is_err());
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(5);
    let ins = [randn(&mut r, &[6, 11], 2.0)];
    let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..11)).collect();
    let rep = fd_check(&ins, 1e-8, |g, v| g.cross_entropy(v[0], &targets).unwrap());
    assert!(rep.max_rel < 1e-5, "{rep:?}");
}

#[test]
fn backward_linear_and_accumulation() {
    let mut g = Graph::new();
    let w = g.param(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
    let x = g.constant(t(&[vec![0.5], vec![-1.0], vec![2.0]]));
    let y = g.matmul(w, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
    g.zero_grad();
    assert!(g.grad(w).is_none_or(|gr| gr.data().iter().all(|v| *v == 0.0)));
    assert!(g.backward(y).is_err(), "non-scalar loss must be rejected");
}

/// Every differentiable op on 100 random instances, each within 1e-4.
#[test]
fn every_op_matches_finite_differences() {
    type Build = fn(&mut Graph, &[lazylayer::tensor::Var], &mut rand_chacha::ChaCha8Rng) -> lazylayer::tensor::Var;
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut r = rng(100 + inst);
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let cases: Vec<(Vec<Tensor>, Build)> = vec![
            (vec![randn(&mut r, &[m, k], 1.0), randn(&mut r, &[k, n], 1.0)], |g, v, _| g.matmul(v[0], v[1]).unwrap()),
            (vec![randn(&mut r, &[m, k], 1.0), randn(&mut r, &[n, k], 1.0)], |g, v, _| g.matmul_t(v[0], v[1]).unwrap()),
            (vec![randn(&mut r, &[m, k], 1.0), randn(&mut r, &[m, k], 1.0)], |g, v, _| g.add(v[0], v[1]).unwrap()),
            (vec![randn(&mut r, &[m, k], 1.0), randn(&mut r, &[m, k], 1.0)], |g, v, _| g.sub(v[0], v[1]).unwrap()),
            (vec![randn(&mut r, &[m, k], 1.0), randn(&mut r, &[m, k], 1.0)], |g, v, _| g.mul(v[0], v[1]).unwrap()),
            (vec![randn(&mut r, &[m, k], 1.0), randn(&mut r, &[k], 1.0)], |g, v, _| g.add_row_broadcast(v[0], v[1]).unwrap()),
            (vec![randn(&mut r, &[m, k], 1.0)], |g, v, _| g.scale(v[0], -1.7)),
            (vec![randn(&mut r, &[m, k], 2.0)], |g, v, _| g.gelu(v[0])),
            (vec![randn(&mut r, &[m, k + 1], 1.0), randn(&mut r, &[k + 1], 1.0), randn(&mut r, &[k + 1], 1.0)], |g, v, _| {
                g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
            }),
            (vec![randn(&mut r, &[m, k], 2.0)], |g, v, r| {
                let (rows, cols) = g.value(v[0]).dims2().unwrap();
                let mut mask: Vec<bool> = (0..rows * cols).map(|_| r.random_bool(0.7)).collect();
                for i in 0..rows {
                    mask[i * cols] = true;
                }
                g.softmax_rows(v[0], Some(&mask)).unwrap()
            }),
            (vec![randn(&mut r, &[m, k + 1], 2.0)], |g, v, r| {
                let cols = g.value(v[0]).shape()[1];
                let rows = g.value(v[0]).shape()[0];
                let targets: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
                g.cross_entropy(v[0], &targets).unwrap()
            }),
            (vec![randn(&mut r, &[m, k + 1], 2.0)], |g, v, r| {
                let teacher = randn(r, g.value(v[0]).shape(), 2.0);
                g.soft_target_kl(v[0], &teacher, 1.5).unwrap()
            }),
            (vec![randn(&mut r, &[5, k], 1.0), randn(&mut r, &[3, k], 1.0)], |g, v, r| {
                let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
                g.embedding(v[0], v[1], &ids, 3).unwrap()
            }),
            (vec![randn(&mut r, &[6, 4], 1.0), randn(&mut r, &[6, 4], 1.0), randn(&mut r, &[6, 4], 1.0)], |g, v, _| {
                g.causal_attention(v[0], v[1], v[2], 2, 3, 2).unwrap()
            }),
        ];
        for (ci, (ins, build)) in cases.into_iter().enumerate() {
            let seed = inst * 100 + ci as u64;
            let rep = fd_check(&ins, 1e-6, |g, v| {
                let mut rr = rng(seed);
                let out = build(g, v, &mut rr);
                if g.value(out).len() == 1 {
                    out
                } else {
                    weighted_sum(g, out, seed)
                }
            });
            assert!(rep.max_rel < 1e-4, "instance {inst} op {ci}: {rep:?}");
            worst = worst.max(rep.max_rel);
        }
    }
    eprintln!("worst relative error over all ops: {worst:.3e}");
}

fn rows_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<bool>)> {
    (1usize..6, 1usize..9).prop_flat_map(|(m, n)| {
        (
            Just(m),
            Just(n),
            prop::collection::vec(-60.0f64..60.0, m * n),
            prop::collection::vec(any::<bool>(), m * n),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((m, n, x, mut mask) in rows_strategy()) {
        for i in 0..m {
            mask[i * n + (i % n)] = true;
        }
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![m, n], x).unwrap());
        let s = g.softmax_rows(v, Some(&mask)).unwrap();
        let s = g.value(s).data();
        for i in 0..m {
            let row = &s[i * n..(i + 1) * n];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..n {
                if !mask[i * n + j] {
                    prop_assert_eq!(row[j], 0.0);
                } else {
                    prop_assert!(row[j] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), dims in prop::collection::vec(1usize..12, 4)) {
        let mut r = rng(seed);
        let a = randn(&mut r, &[dims[0], dims[1]], 1.0);
        let b = randn(&mut r, &[dims[1], dims[2]], 1.0);
        let c = randn(&mut r, &[dims[2], dims[3]], 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let diff: f64 = left.data().iter().zip(right.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-9 * left.frobenius_norm().max(1e-300));
    }
}
