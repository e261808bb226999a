mod common;

use std::collections::BTreeSet;

use common::{randn, rel_err, rng, roughen, FD_STEP};
use lazylayer::data::Corpus;
use lazylayer::model::{extract_layer_range, ModelCheckpoint, ModelConfig, Submodule};
use lazylayer::recipes::{
    distill_loss, distill_loss_with_grad, grow, half_width_init, hybrid_stacking_init, inherit_init, run_inheritune, run_recipe,
    stacking_init, GrowSource, Recipe, RecipeError, TerminatedBy, TrainPlan,
};
use lazylayer::tensor::Tensor;
use rand::Rng;

fn reference(layers: usize, seed: u64) -> ModelCheckpoint {
    let mut m = ModelCheckpoint::init_random(&ModelConfig::new(layers, 2, 16, 16, 256), seed).unwrap();
    roughen(&mut m, seed + 100, 0.2);
    m
}

fn tiny_plan(recipe: Recipe) -> TrainPlan {
    TrainPlan {
        recipe,
        steps_per_round: 6,
        eval_interval: 3,
        eval_batches: 2,
        batch_size: 2,
        context: 16,
        ..TrainPlan::default()
    }
}

fn corpus() -> Corpus {
    Corpus::synthetic(4, 20_000)
}

#[test]
fn inheriting_every_layer_reproduces_the_reference() {
    let r = reference(6, 1);
    let t = inherit_init(&r, 6, &Submodule::all(), 9).unwrap();
    assert_eq!(t.digest(), r.digest());
    let part = inherit_init(&r, 3, &Submodule::all(), 9).unwrap();
    assert_eq!(part.n_layers(), 3);
    assert_eq!(part.weights.wte, r.weights.wte);
    assert_eq!(part.weights.head, r.weights.head);
    assert_eq!(part.weights.ln_f, r.weights.ln_f);
    assert!(inherit_init(&r, 7, &Submodule::all(), 9).is_err());
    assert!(inherit_init(&r, 0, &Submodule::all(), 9).is_err());
}

#[test]
fn inheriting_without_norms_leaves_them_fresh() {
    let r = reference(4, 2);
    let subs: BTreeSet<Submodule> = [Submodule::Attention, Submodule::Mlp].into();
    let t = inherit_init(&r, 2, &subs, 3).unwrap();
    for (a, b) in t.weights.blocks.iter().zip(&r.weights.blocks) {
        assert_eq!(a.attn, b.attn);
        assert_eq!(a.mlp, b.mlp);
        assert_ne!(a.ln_1, b.ln_1);
        assert_ne!(a.ln_2, b.ln_2);
        assert!(a.ln_1.gamma.data().iter().all(|v| *v == 1.0));
    }
}

#[test]
fn growth_appends_the_next_reference_layers() {
    let r = reference(8, 3);
    let t = inherit_init(&r, 4, &Submodule::all(), 0).unwrap();
    let mut trained = t.clone();
    trained.weights.blocks[0].attn.w_q.data_mut()[0] += 1.0;
    let g = grow(&trained, &r, 2, GrowSource::Reference, 0).unwrap();
    assert_eq!(g.n_layers(), 6);
    for i in 0..4 {
        assert_eq!(g.layer_digest(i), trained.layer_digest(i), "trained layer {i} preserved");
    }
    assert_eq!(g.layer_digest(4), r.layer_digest(4));
    assert_eq!(g.layer_digest(5), r.layer_digest(5));

    let full = grow(&g, &r, 2, GrowSource::Reference, 0).unwrap();
    assert!(matches!(grow(&full, &r, 2, GrowSource::Reference, 0), Err(RecipeError::LayerCap { layers: 8, step: 2, max: 8 })));

    let rand = grow(&trained, &r, 2, GrowSource::Random, 5).unwrap();
    assert_ne!(rand.layer_digest(4), r.layer_digest(4));
    assert_eq!(rand.layer_digest(3), trained.layer_digest(3));
}

#[test]
fn stacking_duplicates_and_round_trips() {
    let half = reference(2, 4);
    let s = stacking_init(&half).unwrap();
    assert_eq!(s.n_layers(), 4);
    assert_eq!(s.layer_digest(0), s.layer_digest(2));
    assert_eq!(s.layer_digest(1), s.layer_digest(3));
    let back = extract_layer_range(&s, 0, 2, &Submodule::all())
        .unwrap()
        .into_checkpoint(0, half.provenance.clone())
        .unwrap();
    assert_eq!(back.digest(), half.digest());
    let nine = reference(9, 5);
    assert_eq!(stacking_init(&nine).unwrap().n_layers(), 18);
}

#[test]
fn hybrid_stacking_halves_match_reference_prefix() {
    let r = reference(12, 6);
    let k = 12 / 3;
    let h = hybrid_stacking_init(&r, k).unwrap();
    assert_eq!(h.n_layers(), 2 * k);
    for i in 0..k {
        assert_eq!(h.layer_digest(i), r.layer_digest(i));
        assert_eq!(h.layer_digest(k + i), r.layer_digest(i));
    }
    assert!(hybrid_stacking_init(&r, 13).is_err());
    assert!(hybrid_stacking_init(&r, 0).is_err());
}

#[test]
fn half_width_takes_leading_slices() {
    let r = reference(2, 7);
    let h = half_width_init(&r).unwrap();
    assert_eq!((h.config.hidden, h.config.n_heads, h.n_layers()), (8, 1, 2));
    assert_eq!(h.config.head_dim(), r.config.head_dim());
    let b = &h.weights.blocks[1];
    let rb = &r.weights.blocks[1];
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(b.attn.w_q.at(i, j), rb.attn.w_q.at(i, j));
        }
        for j in 0..32 {
            assert_eq!(b.mlp.w_fc.at(i, j), rb.mlp.w_fc.at(i, j));
        }
    }
    assert_eq!(h.weights.wte.at(200, 7), r.weights.wte.at(200, 7));
    assert!(lazylayer::model::forward(&h, &[1, 2, 3], false).is_ok());

    let four = ModelCheckpoint::init_random(&ModelConfig::new(2, 4, 8, 8, 32), 1).unwrap();
    let twice = half_width_init(&half_width_init(&four).unwrap()).unwrap();
    assert_eq!((twice.config.hidden, twice.config.n_heads), (2, 1));
    assert!(lazylayer::model::forward(&twice, &[1, 2, 3], false).is_ok());
    assert!(half_width_init(&twice).is_err(), "odd head count");
}

fn ce_oracle(logits: &Tensor, targets: &[usize]) -> f64 {
    let (n, v) = logits.dims2().unwrap();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * v..(i + 1) * v];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / n as f64
}

#[test]
fn distill_loss_limits_and_affinity() {
    let mut r = rng(40);
    for _ in 0..50 {
        let (n, v) = (r.random_range(1..6), r.random_range(2..12));
        let s = randn(&mut r, &[n, v], 2.0);
        let t = randn(&mut r, &[n, v], 2.0);
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
        let temp = r.random_range(0.5..3.0);
        let ce = distill_loss(&s, &t, &targets, 1.0, temp).unwrap();
        assert!((ce - ce_oracle(&s, &targets)).abs() < 1e-12);
        assert!(distill_loss(&s, &s, &targets, 0.0, temp).unwrap().abs() < 1e-12);
        let kl = distill_loss(&s, &t, &targets, 0.0, temp).unwrap();
        assert!(kl > 0.0);
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mix = distill_loss(&s, &t, &targets, alpha, temp).unwrap();
            assert!((mix - (alpha * ce + (1.0 - alpha) * kl)).abs() < 1e-10);
        }
    }
}

#[test]
fn distill_gradient_matches_finite_differences() {
    let mut r = rng(41);
    for _ in 0..30 {
        let (n, v) = (r.random_range(1..5), r.random_range(2..9));
        let s = randn(&mut r, &[n, v], 1.5);
        let t = randn(&mut r, &[n, v], 1.5);
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..v)).collect();
        let (alpha, temp) = (r.random_range(0.0..1.0), r.random_range(0.5..3.0));
        let (_, g) = distill_loss_with_grad(&s, &t, &targets, alpha, temp).unwrap();
        for k in 0..s.len() {
            let mut up = s.clone();
            up.data_mut()[k] += FD_STEP;
            let mut down = s.clone();
            down.data_mut()[k] -= FD_STEP;
            let num = (distill_loss(&up, &t, &targets, alpha, temp).unwrap() - distill_loss(&down, &t, &targets, alpha, temp).unwrap())
                / (2.0 * FD_STEP);
            assert!(rel_err(g.data()[k], num, 1e-6) < 1e-5, "{} vs {num}", g.data()[k]);
        }
    }
}

#[test]
fn inheritune_on_full_reference_matches_immediately() {
    let r = reference(4, 8);
    let plan = TrainPlan {
        start_layers: 4,
        steps_per_round: 0,
        ..tiny_plan(Recipe::Inheritune)
    };
    let run = run_inheritune(&r, &corpus(), &plan, None).unwrap();
    assert_eq!(run.terminated_by, TerminatedBy::MatchedReference);
    assert_eq!(run.rounds.len(), 1);
    assert_eq!(run.rounds[0].digest, r.digest());
    assert_eq!(run.rounds[0].val_loss, run.reference_val_loss.unwrap());
}

#[test]
fn inheritune_rounds_grow_by_step_until_the_cap() {
    let r = reference(6, 9);
    let plan = TrainPlan {
        start_layers: 2,
        max_rounds: 10,
        ..tiny_plan(Recipe::Inheritune)
    };
    let run = run_inheritune(&r, &corpus(), &plan, None).unwrap();
    let layers: Vec<usize> = run.rounds.iter().map(|x| x.layers).collect();
    assert!([2, 4, 6].starts_with(&layers), "{layers:?}");
    let last = run.rounds.last().unwrap();
    match run.terminated_by {
        TerminatedBy::MatchedReference => assert!(last.val_loss <= run.reference_val_loss.unwrap()),
        TerminatedBy::LayerCap => assert_eq!(layers, [2, 4, 6]),
        TerminatedBy::MaxRounds => panic!("max_rounds was not binding"),
    }
    let capped = run_inheritune(&r, &corpus(), &TrainPlan { max_rounds: 1, ..plan.clone() }, None).unwrap();
    assert_eq!(capped.rounds.len(), 1);
    assert!(capped.terminated_by != TerminatedBy::LayerCap);
    assert!(run_inheritune(&r, &corpus(), &TrainPlan { start_layers: 7, ..plan }, None).is_err());
}

#[test]
fn recipe_runs_are_reproducible() {
    let r = reference(4, 10);
    for recipe in [Recipe::Inheritune, Recipe::Scratch, Recipe::Stacking, Recipe::HybridStacking, Recipe::HalfWidth, Recipe::Distill] {
        let plan = TrainPlan {
            start_layers: 2,
            max_rounds: 2,
            ..tiny_plan(recipe)
        };
        let a = run_recipe(&plan, &corpus(), Some(&r), None).unwrap();
        let b = run_recipe(&plan, &corpus(), Some(&r), None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap(), "{recipe}");
        assert!(a.rounds.iter().all(|x| x.val_loss.is_finite()));
    }
}

#[test]
fn layer_range_recipe_uses_the_requested_layers() {
    let r = reference(6, 11);
    let plan = TrainPlan {
        layer_range: Some([2, 5]),
        steps_per_round: 0,
        ..tiny_plan(Recipe::LayerRange)
    };
    let run = run_recipe(&plan, &corpus(), Some(&r), None).unwrap();
    assert_eq!(run.rounds[0].layers, 3);
    assert!(matches!(
        run_recipe(&tiny_plan(Recipe::HalfWidth), &corpus(), None, None),
        Err(RecipeError::MissingReference(_))
    ));
    let bad = TrainPlan { alpha: 1.5, ..tiny_plan(Recipe::Distill) };
    assert!(matches!(bad.validate(), Err(RecipeError::InvalidPlan(_))));
}
