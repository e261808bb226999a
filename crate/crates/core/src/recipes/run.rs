//! Recipe drivers and the run-directory layout:
//! `run.json`, `round_k.llck`, `trace.csv`, `result.json`, plus a
//! `resume/` directory while a resumable run is in progress.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::init::{grow, half_width_init, hybrid_stacking_init, inherit_init, layer_range_init, stacking_init};
use super::{Recipe, RecipeError, TrainPlan};
use crate::data::report::write_trace_csv;
use crate::data::{BatchSampler, Corpus};
use crate::model::train::{distill_objective, AdamState, LossTrace, TracePoint, Teacher, Trainer};
use crate::model::{evaluate_loss, read_checkpoint, write_checkpoint, ModelCheckpoint, ModelError, Provenance, Weights};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    MatchedReference,
    LayerCap,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub layers: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub digest: String,
    /// Steps are counted from the start of this round.
    pub trace: LossTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeRun {
    pub recipe: Recipe,
    pub rounds: Vec<RoundResult>,
    pub reference_val_loss: Option<f64>,
    pub terminated_by: TerminatedBy,
    pub corpus_digest: String,
}

impl RecipeRun {
    /// All rounds' trace points with steps made cumulative across rounds.
    pub fn cumulative_trace(&self) -> Vec<TracePoint> {
        let mut offset = 0;
        let mut out = Vec::new();
        for r in &self.rounds {
            out.extend(r.trace.points.iter().map(|p| TracePoint { step: p.step + offset, ..p.clone() }));
            offset += r.steps;
        }
        out
    }
}

/// Trains `init` for `steps` steps under `plan`'s optimizer and eval
/// settings. The trace starts with a point at step 0.
pub fn train_model(
    init: ModelCheckpoint,
    sampler: &BatchSampler,
    plan: &TrainPlan,
    steps: u64,
    teacher: Option<Teacher>,
) -> Result<(ModelCheckpoint, LossTrace), RecipeError> {
    let horizon = plan.steps_per_round.max(1);
    let mut t = Trainer::new(init, sampler, plan.train_options(), horizon)?;
    if let Some(te) = teacher {
        t = t.with_teacher(te)?;
    }
    let first = t.record()?;
    let mut trace = t.run_to(steps, |_, _| Ok(()))?;
    trace.points.insert(0, first);
    Ok((t.ckpt, trace))
}

fn round_result(round: usize, steps: u64, ckpt: &ModelCheckpoint, trace: LossTrace) -> RoundResult {
    let last = trace.last().expect("trace has the step-0 point").clone();
    RoundResult {
        round,
        layers: ckpt.n_layers(),
        steps,
        train_loss: last.train_loss,
        val_loss: last.val_loss,
        digest: ckpt.digest(),
        trace,
    }
}

struct RunDir(PathBuf);

impl RunDir {
    fn create(path: &Path, plan: &TrainPlan, provenance: serde_json::Value) -> Result<Self, RecipeError> {
        std::fs::create_dir_all(path)?;
        let run = serde_json::json!({ "plan": plan, "provenance": provenance });
        let file = path.join("run.json");
        if file.exists() {
            let old: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file)?)?;
            if old.get("plan") != run.get("plan") {
                return Err(RecipeError::InvalidPlan(format!("{} holds a run with a different plan", path.display())));
            }
        } else {
            std::fs::write(file, serde_json::to_string_pretty(&run)?)?;
        }
        Ok(Self(path.to_path_buf()))
    }

    fn save_round(&self, k: usize, ckpt: &ModelCheckpoint) -> Result<(), RecipeError> {
        Ok(write_checkpoint(self.0.join(format!("round_{k}.llck")), ckpt)?)
    }

    fn trace(&self, points: &[TracePoint]) -> Result<(), RecipeError> {
        write_trace_csv(self.0.join("trace.csv"), points)?;
        Ok(())
    }

    fn result(&self, run: &RecipeRun) -> Result<(), RecipeError> {
        std::fs::write(self.0.join("result.json"), serde_json::to_string_pretty(run)?)?;
        Ok(())
    }
}

fn provenance_json(plan: &TrainPlan, corpus: &Corpus, reference: Option<&ModelCheckpoint>) -> serde_json::Value {
    serde_json::json!({
        "recipe": plan.recipe,
        "corpus_digest": corpus.digest_hex(),
        "reference_digest": reference.map(|r| r.digest()),
        "grow_source": plan.grow_source,
        "temperature": plan.temperature,
        "alpha": plan.alpha,
        "seed": plan.seed,
    })
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Inherit the first `start_layers` layers, then alternate training and
/// growth until the target's val loss is at most the reference's, growth
/// would pass the reference depth, or `max_rounds` rounds have run.
pub fn run_inheritune(reference: &ModelCheckpoint, corpus: &Corpus, plan: &TrainPlan, run_dir: Option<&Path>) -> Result<RecipeRun, RecipeError> {
    plan.validate()?;
    let max = reference.n_layers();
    if plan.start_layers > max {
        return Err(ModelError::LayerRange {
            first: 0,
            last: plan.start_layers,
            layers: max,
        }
        .into());
    }
    let dir = run_dir
        .map(|p| RunDir::create(p, plan, provenance_json(plan, corpus, Some(reference))))
        .transpose()?;
    let sampler = BatchSampler::new(corpus, plan.batch_size, plan.context, plan.seed);
    let reference_val = evaluate_loss(reference, &sampler.val_batches(plan.eval_batches)?)?;
    let mut target = inherit_init(reference, plan.start_layers, &plan.submodules, plan.seed)?;
    let mut run = RecipeRun {
        recipe: Recipe::Inheritune,
        rounds: Vec::new(),
        reference_val_loss: Some(reference_val),
        terminated_by: TerminatedBy::MaxRounds,
        corpus_digest: corpus.digest_hex(),
    };
    for round in 1.. {
        let (mut trained, trace) = train_model(target, &sampler, plan, plan.steps_per_round, None)?;
        trained.provenance.recipe = "inheritune".into();
        trained.provenance = trained.provenance.note("round", round);
        let res = round_result(round, plan.steps_per_round, &trained, trace);
        let val = res.val_loss;
        run.rounds.push(res);
        if let Some(d) = &dir {
            d.save_round(round, &trained)?;
            d.trace(&run.cumulative_trace())?;
        }
        let layers = trained.n_layers();
        let stop = if val <= reference_val {
            Some(TerminatedBy::MatchedReference)
        } else if layers + plan.growth_step > max {
            Some(TerminatedBy::LayerCap)
        } else if round >= plan.max_rounds {
            Some(TerminatedBy::MaxRounds)
        } else {
            None
        };
        if let Some(t) = stop {
            run.terminated_by = t;
            break;
        }
        target = grow(&trained, reference, plan.growth_step, plan.grow_source, round_seed(plan.seed, round))?;
    }
    if let Some(d) = &dir {
        d.result(&run)?;
    }
    Ok(run)
}

fn need_ref<'a>(plan: &TrainPlan, reference: Option<&'a ModelCheckpoint>) -> Result<&'a ModelCheckpoint, RecipeError> {
    reference.ok_or_else(|| RecipeError::MissingReference(plan.recipe.to_string()))
}

/// Initial model of a single-round recipe.
fn initial_model(plan: &TrainPlan, reference: Option<&ModelCheckpoint>) -> Result<ModelCheckpoint, RecipeError> {
    let seed = plan.seed;
    Ok(match plan.recipe {
        Recipe::Scratch | Recipe::Distill | Recipe::Stacking => {
            let cfg = plan.target_config(reference)?;
            let mut m = ModelCheckpoint::init_random(&cfg, seed)?;
            m.provenance.recipe = plan.recipe.to_string();
            m
        }
        Recipe::HybridStacking => hybrid_stacking_init(need_ref(plan, reference)?, plan.start_layers)?,
        Recipe::HalfWidth => half_width_init(need_ref(plan, reference)?)?,
        Recipe::LayerRange => {
            let [first, last] = plan.layer_range.expect("validated");
            layer_range_init(need_ref(plan, reference)?, first, last, &plan.submodules, seed, Provenance::new("layer_range"))?
        }
        Recipe::Inheritune => inherit_init(need_ref(plan, reference)?, plan.start_layers, &plan.submodules, seed)?,
    })
}

fn teacher_for<'a>(plan: &TrainPlan, reference: Option<&'a ModelCheckpoint>) -> Result<Option<Teacher<'a>>, RecipeError> {
    Ok(match plan.recipe {
        Recipe::Distill => Some(Teacher {
            model: need_ref(plan, reference)?,
            alpha: plan.alpha,
            temperature: plan.temperature,
        }),
        _ => None,
    })
}

fn finish(run: &mut RecipeRun) {
    let last = run.rounds.last().map(|r| r.val_loss);
    run.terminated_by = match (run.reference_val_loss, last) {
        (Some(r), Some(v)) if v <= r => TerminatedBy::MatchedReference,
        _ => TerminatedBy::MaxRounds,
    };
}

/// Runs any recipe to completion. Stacking trains `start_layers` layers,
/// doubles them, and trains again; the other baselines are one round.
pub fn run_recipe(plan: &TrainPlan, corpus: &Corpus, reference: Option<&ModelCheckpoint>, run_dir: Option<&Path>) -> Result<RecipeRun, RecipeError> {
    if plan.recipe == Recipe::Inheritune {
        return run_inheritune(need_ref(plan, reference)?, corpus, plan, run_dir);
    }
    plan.validate()?;
    let dir = run_dir
        .map(|p| RunDir::create(p, plan, provenance_json(plan, corpus, reference)))
        .transpose()?;
    let sampler = BatchSampler::new(corpus, plan.batch_size, plan.context, plan.seed);
    let reference_val_loss = reference
        .map(|r| evaluate_loss(r, &sampler.val_batches(plan.eval_batches)?).map_err(RecipeError::from))
        .transpose()?;
    let mut run = RecipeRun {
        recipe: plan.recipe,
        rounds: Vec::new(),
        reference_val_loss,
        terminated_by: TerminatedBy::MaxRounds,
        corpus_digest: corpus.digest_hex(),
    };
    let teacher = teacher_for(plan, reference)?;
    let mut model = initial_model(plan, reference)?;
    if let Some(d) = &dir {
        d.save_round(0, &model)?;
    }
    let rounds = if plan.recipe == Recipe::Stacking { 2 } else { 1 };
    for round in 1..=rounds {
        if round == 2 {
            model = stacking_init(&model)?;
        }
        let (trained, trace) = train_model(model, &sampler, plan, plan.steps_per_round, teacher)?;
        run.rounds.push(round_result(round, plan.steps_per_round, &trained, trace));
        if let Some(d) = &dir {
            d.save_round(round, &trained)?;
            d.trace(&run.cumulative_trace())?;
        }
        model = trained;
    }
    finish(&mut run);
    if let Some(d) = &dir {
        d.result(&run)?;
    }
    Ok(run)
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    step: u64,
    points: Vec<TracePoint>,
}

fn moments_checkpoint(like: &ModelCheckpoint, tensors: &[Tensor], name: &str) -> Result<ModelCheckpoint, RecipeError> {
    let mut w = Weights::zeros(&like.config);
    for ((_, slot), t) in w.named_mut().into_iter().zip(tensors) {
        *slot = t.clone();
    }
    Ok(ModelCheckpoint::new(like.config.clone(), w, Provenance::new(name))?)
}

fn moments_of(c: ModelCheckpoint) -> Vec<Tensor> {
    c.weights.named().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Resumable single-round training into `dir`. Progress (model, optimizer
/// moments, trace) is saved at every eval point; rerunning with the same
/// plan continues from the last save. `stop_after` ends the session at the
/// first eval point at or after it (returns `None`), as an interruption would.
pub fn train_in_dir(
    plan: &TrainPlan,
    corpus: &Corpus,
    reference: Option<&ModelCheckpoint>,
    dir: &Path,
    stop_after: Option<u64>,
) -> Result<Option<RecipeRun>, RecipeError> {
    if matches!(plan.recipe, Recipe::Inheritune | Recipe::Stacking) {
        return run_recipe(plan, corpus, reference, Some(dir)).map(Some);
    }
    plan.validate()?;
    let rd = RunDir::create(dir, plan, provenance_json(plan, corpus, reference))?;
    let sampler = BatchSampler::new(corpus, plan.batch_size, plan.context, plan.seed);
    let reference_val_loss = reference
        .map(|r| evaluate_loss(r, &sampler.val_batches(plan.eval_batches)?).map_err(RecipeError::from))
        .transpose()?;
    let teacher = teacher_for(plan, reference)?;
    let resume = dir.join("resume");
    let steps = plan.steps_per_round;
    let horizon = steps.max(1);

    let (mut trainer, mut points) = if resume.join("state.json").exists() {
        let st: ResumeState = serde_json::from_str(&std::fs::read_to_string(resume.join("state.json"))?)?;
        let ckpt = read_checkpoint(resume.join("model.llck"))?;
        let adam = AdamState {
            m: moments_of(read_checkpoint(resume.join("adam_m.llck"))?),
            v: moments_of(read_checkpoint(resume.join("adam_v.llck"))?),
        };
        (Trainer::resume(ckpt, adam, st.step, &sampler, plan.train_options(), horizon)?, st.points)
    } else {
        let init = initial_model(plan, reference)?;
        rd.save_round(0, &init)?;
        let mut t = Trainer::new(init, &sampler, plan.train_options(), horizon)?;
        if let Some(te) = teacher {
            t = t.with_teacher(te)?;
        }
        let first = t.record()?;
        (t, vec![first])
    };
    if trainer.step > 0 {
        if let Some(te) = teacher {
            trainer = trainer.with_teacher(te)?;
        }
    }
    rd.trace(&points)?;

    // Sessions end on an eval point so the saved state covers every step.
    let ei = plan.eval_interval;
    let target = stop_after.map_or(steps, |s| s.div_ceil(ei) * ei).min(steps);
    let save = |points: &[TracePoint], t: &Trainer| -> Result<(), RecipeError> {
        std::fs::create_dir_all(&resume)?;
        write_checkpoint(resume.join("model.llck"), &t.ckpt)?;
        write_checkpoint(resume.join("adam_m.llck"), &moments_checkpoint(&t.ckpt, &t.adam.m, "adam_m")?)?;
        write_checkpoint(resume.join("adam_v.llck"), &moments_checkpoint(&t.ckpt, &t.adam.v, "adam_v")?)?;
        let st = ResumeState { step: t.step, points: points.to_vec() };
        let tmp = resume.join("state.json.tmp");
        std::fs::write(&tmp, serde_json::to_string(&st)?)?;
        std::fs::rename(tmp, resume.join("state.json"))?;
        write_trace_csv(dir.join("trace.csv"), points)?;
        Ok(())
    };
    let mut save_err = None;
    trainer.run_to(target, |p, t| {
        points.push(p.clone());
        if let Err(e) = save(&points, t) {
            save_err = Some(e);
            return Err(ModelError::Unsupported("saving run state failed".into()));
        }
        Ok(())
    })
    .map_err(|e| save_err.take().unwrap_or(e.into()))?;

    if trainer.step < steps {
        return Ok(None);
    }
    let trace = LossTrace { points };
    let mut run = RecipeRun {
        recipe: plan.recipe,
        rounds: vec![round_result(1, steps, &trainer.ckpt, trace)],
        reference_val_loss,
        terminated_by: TerminatedBy::MaxRounds,
        corpus_digest: corpus.digest_hex(),
    };
    finish(&mut run);
    if steps > 0 {
        rd.save_round(1, &trainer.ckpt)?;
    }
    rd.result(&run)?;
    if resume.exists() {
        std::fs::remove_dir_all(&resume)?;
    }
    Ok(Some(run))
}

/// `alpha · CE(student, targets) + (1 − alpha) · T² · KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn distill_loss(student: &Tensor, teacher: &Tensor, targets: &[usize], alpha: f64, temperature: f64) -> Result<f64, RecipeError> {
    Ok(distill_loss_with_grad(student, teacher, targets, alpha, temperature)?.0)
}

/// [`distill_loss`] and its gradient with respect to the student logits.
pub fn distill_loss_with_grad(student: &Tensor, teacher: &Tensor, targets: &[usize], alpha: f64, temperature: f64) -> Result<(f64, Tensor), RecipeError> {
    let mut g = Graph::new();
    let s = g.param(student.clone());
    let loss = distill_objective(&mut g, s, teacher, targets, alpha, temperature)?;
    g.backward(loss)?;
    let grad = g.take_grad(s).unwrap_or_else(|| Tensor::zeros(student.shape()));
    Ok((g.value(loss).data()[0], grad))
}
