//! Compilation of validated specifications into differentiable penalties,
//! and the fine-tuning loop that minimizes them next to the marginal loss.

pub mod finetune;
pub mod mask;
pub mod spec;
pub mod stat;
pub mod surrogate;
mod surrogate_config;
pub mod tune;

use thiserror::Error;

pub use finetune::{finetune, FinetuneConfig, FinetuneEpoch, FinetuneLog};
pub use mask::{implication_loss, row_constraint_loss, row_mask};
pub use spec::{compile, weighted_penalty, CompileOptions, CompiledSpec, Objective, SpecEval, Verdict, VerifyConfig};
pub use stat::{conditional_marginal, relation_loss, stat_node, stat_value};
pub use surrogate::{fit_logistic, surrogate_index, Reference};
pub use surrogate_config::SurrogateConfig;
pub use tune::{fold_indices, tune_weights, TuneConfig, TuneRow};

use crate::generator::GeneratorError;
use crate::grad::GradError;
use crate::pretrain::PretrainError;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("{0}: a protected group is empty in the reference data")]
    EmptyProtectedGroup(String),
    #[error("no spec named `{0}`")]
    UnknownSpec(String),
    #[error("{0}: weight {1} must be finite and non-negative")]
    InvalidWeight(String, f64),
    #[error("invalid tuning setup: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
}
