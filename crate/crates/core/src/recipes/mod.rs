//! Training recipes: layer inheritance with growth rounds and the
//! warm-started and cold baselines it is compared against.

mod init;
mod plan;
mod run;

use thiserror::Error;

pub use init::{grow, half_width_init, hybrid_stacking_init, inherit_init, layer_range_init, stacking_init};
pub use plan::{DataSpec, GrowSource, Recipe, TrainPlan, PLAN_VERSION};
pub use run::{
    distill_loss, distill_loss_with_grad, run_inheritune, run_recipe, train_in_dir, train_model, RecipeRun, RoundResult,
    TerminatedBy,
};

use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("growing {layers} layers by {step} would exceed the reference's {max}")]
    LayerCap { layers: usize, step: usize, max: usize },
    #[error("recipe {0} needs a reference checkpoint")]
    MissingReference(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<crate::tensor::TensorError> for RecipeError {
    fn from(e: crate::tensor::TensorError) -> Self {
        RecipeError::Model(e.into())
    }
}
