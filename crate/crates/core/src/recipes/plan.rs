use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RecipeError;
use crate::data::Corpus;
use crate::model::train::{OptimizerConfig, TrainOptions};
use crate::model::{ModelCheckpoint, ModelConfig, Submodule};

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Inheritune,
    Scratch,
    Stacking,
    HybridStacking,
    HalfWidth,
    LayerRange,
    Distill,
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum");
        f.write_str(s.as_str().expect("string"))
    }
}

/// Where the layers appended by a growth step come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GrowSource {
    /// The reference's next contiguous layers.
    #[default]
    Reference,
    /// Fresh random blocks.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Generated text, see [`crate::data::synthetic_text`].
    Synthetic { seed: u64, bytes: usize },
    File { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic { seed: 0, bytes: 2_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub version: u32,
    pub recipe: Recipe,
    /// Architecture for recipes that build a model from scratch. When
    /// absent, the reference's config with `start_layers` layers is used.
    pub model: Option<ModelConfig>,
    /// Reference checkpoint path (inheritance source, or distillation teacher).
    pub reference: Option<PathBuf>,
    pub start_layers: usize,
    pub growth_step: usize,
    pub steps_per_round: u64,
    pub max_rounds: usize,
    pub submodules: BTreeSet<Submodule>,
    pub optimizer: OptimizerConfig,
    pub alpha: f64,
    pub temperature: f64,
    pub grow_source: GrowSource,
    /// `[first, last_exclusive)` for the layer-range recipe.
    pub layer_range: Option<[usize; 2]>,
    pub seed: u64,
    pub data: DataSpec,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub context: usize,
    pub eval_interval: u64,
    pub eval_batches: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            version: PLAN_VERSION,
            recipe: Recipe::Scratch,
            model: None,
            reference: None,
            start_layers: 1,
            growth_step: 2,
            steps_per_round: 1000,
            max_rounds: 8,
            submodules: Submodule::all(),
            optimizer: OptimizerConfig::default(),
            alpha: 0.6,
            temperature: 1.0,
            grow_source: GrowSource::Reference,
            layer_range: None,
            seed: 0,
            data: DataSpec::default(),
            val_fraction: 0.1,
            batch_size: 4,
            context: 64,
            eval_interval: 100,
            eval_batches: 8,
        }
    }
}

impl TrainPlan {
    pub fn from_json(text: &str) -> Result<Self, RecipeError> {
        let plan: TrainPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RecipeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), RecipeError> {
        let bad = |m: String| Err(RecipeError::InvalidPlan(m));
        if self.version != PLAN_VERSION {
            return bad(format!("plan version {} (expected {PLAN_VERSION})", self.version));
        }
        if self.start_layers < 1 {
            return bad("start_layers must be >= 1".into());
        }
        if self.growth_step < 1 {
            return bad("growth_step must be >= 1".into());
        }
        if self.max_rounds < 1 {
            return bad("max_rounds must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0,1]", self.alpha));
        }
        if self.temperature <= 0.0 {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if self.batch_size == 0 || self.context == 0 || self.eval_interval == 0 || self.eval_batches == 0 {
            return bad("batch_size, context, eval_interval and eval_batches must be >= 1".into());
        }
        if self.submodules.is_empty() {
            return bad("submodules must not be empty".into());
        }
        if self.recipe == Recipe::LayerRange && self.layer_range.is_none() {
            return bad("layer_range recipe needs `layer_range`".into());
        }
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn needs_reference(&self) -> bool {
        match self.recipe {
            Recipe::Scratch | Recipe::Stacking => self.model.is_none(),
            _ => true,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            optimizer: self.optimizer.clone(),
            horizon: Some(self.steps_per_round),
            eval_interval: self.eval_interval,
            eval_batches: self.eval_batches,
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus, RecipeError> {
        Ok(match &self.data {
            DataSpec::Synthetic { seed, bytes } => Corpus::from_bytes(crate::data::synthetic_text(*seed, *bytes).into_bytes(), self.val_fraction)?,
            DataSpec::File { path } => Corpus::from_file(path, self.val_fraction)?,
        })
    }

    /// Architecture of the model the recipe trains from scratch.
    pub fn target_config(&self, reference: Option<&ModelCheckpoint>) -> Result<ModelConfig, RecipeError> {
        match (&self.model, reference) {
            (Some(m), _) => Ok(m.clone()),
            (None, Some(r)) => Ok(r.config.with_layers(self.start_layers)),
            (None, None) => Err(RecipeError::InvalidPlan("plan needs `model` or a reference checkpoint".into())),
        }
    }
}
