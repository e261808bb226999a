//! AdamW training loop with warmup plus cosine decay, global-norm clipping,
//! periodic evaluation and resumable state.

use serde::{Deserialize, Serialize};

use super::forward::{batch_loss, bind_owned, build_logits, check_tokens, forward_batch, unbind};
use super::{evaluate_loss, ModelCheckpoint, ModelError, Weights};
use crate::data::{Batch, BatchSampler};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Floor reached at the end of the cosine decay.
    pub min_lr: f64,
    pub warmup: u64,
    pub schedule: Schedule,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Decoupled decay applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-4,
            warmup: 100,
            schedule: Schedule::Cosine,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.1,
            clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr.max(self.min_lr)) {
            return bad(format!("learning rates lr={} min_lr={}", self.lr, self.min_lr));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} outside [0,1)", self.betas));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.clip >= 0.0) {
            return bad("eps must be > 0, weight_decay and clip >= 0".into());
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of a run lasting `horizon` steps.
    pub fn lr_at(&self, step: u64, horizon: u64) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = horizon.saturating_sub(self.warmup).max(1);
                let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
                let floor = self.min_lr.min(self.lr);
                floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// Soft-target objective: `alpha · CE + (1 − alpha) · T² · KL(teacher ‖ student)`.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub model: &'a ModelCheckpoint,
    pub alpha: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub optimizer: OptimizerConfig,
    /// Length of the schedule; defaults to the number of steps requested.
    pub horizon: Option<u64>,
    /// Evaluate every this many steps (and after the final one).
    pub eval_interval: u64,
    pub eval_batches: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            horizon: None,
            eval_interval: 100,
            eval_batches: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Optimizer steps completed when the point was recorded.
    pub step: u64,
    /// Mean training objective over the steps since the previous point.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub points: Vec<TracePoint>,
}

impl LossTrace {
    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }

    /// Val loss recorded exactly at `step`, if any.
    pub fn val_at(&self, step: u64) -> Option<f64> {
        self.points.iter().find(|p| p.step == step).map(|p| p.val_loss)
    }
}

/// AdamW first and second moments, in canonical tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros(ckpt: &ModelCheckpoint) -> Self {
        let m: Vec<Tensor> = ckpt.weights.named().into_iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { v: m.clone(), m }
    }
}

/// Stepwise trainer; owns the model while training.
pub struct Trainer<'a> {
    pub ckpt: ModelCheckpoint,
    pub adam: AdamState,
    /// Optimizer steps completed.
    pub step: u64,
    sampler: &'a BatchSampler<'a>,
    opts: TrainOptions,
    horizon: u64,
    teacher: Option<Teacher<'a>>,
    val: Vec<Batch>,
    pending: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(ckpt: ModelCheckpoint, sampler: &'a BatchSampler<'a>, opts: TrainOptions, horizon: u64) -> Result<Self, ModelError> {
        let adam = AdamState::zeros(&ckpt);
        Self::resume(ckpt, adam, 0, sampler, opts, horizon)
    }

    pub fn resume(
        ckpt: ModelCheckpoint,
        adam: AdamState,
        step: u64,
        sampler: &'a BatchSampler<'a>,
        opts: TrainOptions,
        horizon: u64,
    ) -> Result<Self, ModelError> {
        opts.optimizer.validate()?;
        if opts.eval_interval == 0 || opts.eval_batches == 0 {
            return Err(ModelError::InvalidConfig("eval_interval and eval_batches must be >= 1".into()));
        }
        let shapes_ok = adam.m.len() == adam.v.len()
            && ckpt
                .weights
                .named()
                .iter()
                .zip(adam.m.iter().zip(&adam.v))
                .all(|((_, w), (m, v))| w.shape() == m.shape() && w.shape() == v.shape());
        if !shapes_ok || adam.m.len() != ckpt.weights.named().len() {
            return Err(ModelError::InvalidConfig("optimizer state does not match model shapes".into()));
        }
        let val = sampler.val_batches(opts.eval_batches)?;
        Ok(Self {
            ckpt,
            adam,
            step,
            sampler,
            opts,
            horizon,
            teacher: None,
            val,
            pending: Vec::new(),
        })
    }

    pub fn with_teacher(mut self, teacher: Teacher<'a>) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&teacher.alpha) || teacher.temperature <= 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "distillation alpha {} / temperature {}",
                teacher.alpha, teacher.temperature
            )));
        }
        if teacher.model.config.vocab != self.ckpt.config.vocab {
            return Err(ModelError::InvalidConfig("teacher vocabulary differs from student".into()));
        }
        self.teacher = Some(teacher);
        Ok(self)
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    pub fn val_loss(&self) -> Result<f64, ModelError> {
        evaluate_loss(&self.ckpt, &self.val)
    }

    /// Training objective on the batch for the current step, without updating.
    pub fn probe_train_loss(&self) -> Result<f64, ModelError> {
        let b = self.sampler.train_batch(self.step)?;
        match self.teacher {
            None => batch_loss(&self.ckpt, &b),
            Some(t) => {
                let mut c = self.ckpt.clone();
                let mut g = Graph::new();
                let (loss, vars) = objective(&mut g, &mut c, &b, Some(t))?;
                let v = g.value(loss).data()[0];
                unbind(&mut g, &vars, &mut c.weights);
                Ok(v)
            }
        }
    }

    /// One optimizer step; returns the training objective before the update.
    pub fn step(&mut self) -> Result<f64, ModelError> {
        let batch = self.sampler.train_batch(self.step)?;
        let mut g = Graph::new();
        let (loss_var, vars) = objective(&mut g, &mut self.ckpt, &batch, self.teacher)?;
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            unbind(&mut g, &vars, &mut self.ckpt.weights);
            return Err(ModelError::Diverged {
                step: self.step as usize,
                loss,
            });
        }
        g.backward(loss_var)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
            .collect();
        unbind(&mut g, &vars, &mut self.ckpt.weights);
        let lr = self.opts.optimizer.lr_at(self.step, self.horizon);
        self.apply(grads, lr);
        self.step += 1;
        self.ckpt.provenance.steps += 1;
        self.pending.push(loss);
        Ok(loss)
    }

    fn apply(&mut self, mut grads: Vec<Tensor>, lr: f64) {
        let o = &self.opts.optimizer;
        if o.clip > 0.0 {
            let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > o.clip {
                let s = o.clip / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        let t = (self.step + 1) as i32;
        let [b1, b2] = o.betas;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let weights = self.ckpt.weights.named_mut();
        for (((_, w), g), (m, v)) in weights.into_iter().zip(&grads).zip(self.adam.m.iter_mut().zip(self.adam.v.iter_mut())) {
            let decay = if w.shape().len() == 2 { o.weight_decay } else { 0.0 };
            let (w, g, m, v) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + o.eps);
                w[i] -= lr * (update + decay * w[i]);
            }
        }
    }

    /// Closes the current eval interval: mean pending train loss plus a val pass.
    pub fn record(&mut self) -> Result<TracePoint, ModelError> {
        let train_loss = if self.pending.is_empty() {
            self.probe_train_loss()?
        } else {
            self.pending.iter().sum::<f64>() / self.pending.len() as f64
        };
        self.pending.clear();
        let val_loss = self.val_loss()?;
        if !val_loss.is_finite() {
            return Err(ModelError::Diverged {
                step: self.step as usize,
                loss: val_loss,
            });
        }
        Ok(TracePoint {
            step: self.step,
            train_loss,
            val_loss,
            lr: self.opts.optimizer.lr_at(self.step.min(self.horizon.saturating_sub(1)), self.horizon),
        })
    }

    /// Steps until `target` total steps, recording a point every
    /// `eval_interval` steps and at `target`. `on_point` sees each point
    /// together with the trainer (e.g. to checkpoint).
    pub fn run_to(&mut self, target: u64, mut on_point: impl FnMut(&TracePoint, &Trainer<'a>) -> Result<(), ModelError>) -> Result<LossTrace, ModelError> {
        let mut trace = LossTrace::default();
        while self.step < target {
            self.step()?;
            if self.step % self.opts.eval_interval == 0 || self.step == target {
                let p = self.record()?;
                on_point(&p, self)?;
                trace.points.push(p);
            }
        }
        Ok(trace)
    }
}

fn objective(g: &mut Graph, ckpt: &mut ModelCheckpoint, b: &Batch, teacher: Option<Teacher>) -> Result<(Var, Vec<Var>), ModelError> {
    let ids = check_tokens(&ckpt.config, &b.inputs, b.seq_len)?;
    let targets: Vec<usize> = b.targets.iter().map(|&t| t as usize).collect();
    let cfg = ckpt.config.clone();
    let teacher_logits = teacher
        .map(|t| forward_batch(t.model, &b.inputs, b.batch_size, false).map(|o| o.logits))
        .transpose()?;
    let vars = bind_owned(g, &mut ckpt.weights);
    let built = (|| -> Result<Var, ModelError> {
        let (logits, _) = build_logits(g, &vars, &cfg, &ids, b.batch_size, b.seq_len)?;
        Ok(match (teacher, &teacher_logits) {
            (Some(t), Some(tl)) => distill_objective(g, logits, tl, &targets, t.alpha, t.temperature)?,
            _ => g.cross_entropy(logits, &targets)?,
        })
    })();
    match built {
        Ok(loss) => Ok((loss, vars)),
        Err(e) => {
            unbind(g, &vars, &mut ckpt.weights);
            Err(e)
        }
    }
}

/// `alpha · CE(student, targets) + (1 − alpha) · T² · KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub(crate) fn distill_objective(g: &mut Graph, logits: Var, teacher: &Tensor, targets: &[usize], alpha: f64, temperature: f64) -> Result<Var, TensorError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::InvalidArgument(format!("alpha {alpha} outside [0,1]")));
    }
    let ce = g.cross_entropy(logits, targets)?;
    let kl = g.soft_target_kl(logits, teacher, temperature)?;
    let a = g.scale(ce, alpha);
    let b = g.scale(kl, 1.0 - alpha);
    g.add(a, b)
}

/// Training objective on `batch` and its gradient, laid out like the weights.
pub fn loss_and_grads(ckpt: &ModelCheckpoint, batch: &Batch, teacher: Option<Teacher>) -> Result<(f64, Weights), ModelError> {
    let mut c = ckpt.clone();
    let mut g = Graph::new();
    let (loss, vars) = objective(&mut g, &mut c, batch, teacher)?;
    g.backward(loss)?;
    let mut grads = Weights::zeros(&ckpt.config);
    for ((_, slot), v) in grads.named_mut().into_iter().zip(&vars) {
        if let Some(t) = g.take_grad(*v) {
            *slot = t;
        }
    }
    Ok((g.value(loss).data()[0], grads))
}

/// Trains a copy of `ckpt` for `steps` optimizer steps from step 0.
pub fn train_steps(ckpt: &ModelCheckpoint, sampler: &BatchSampler, opts: &TrainOptions, steps: u64) -> Result<(ModelCheckpoint, LossTrace), ModelError> {
    if steps == 0 {
        return Err(ModelError::InvalidConfig("steps must be >= 1".into()));
    }
    let horizon = opts.horizon.unwrap_or(steps);
    let mut t = Trainer::new(ckpt.clone(), sampler, opts.clone(), horizon)?;
    let trace = t.run_to(steps, |_, _| Ok(()))?;
    Ok((t.ckpt, trace))
}
