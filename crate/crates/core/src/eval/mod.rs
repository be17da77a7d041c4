//! Rejection sampling, fairness metrics, the downstream evaluator and reports.

pub mod downstream;
pub mod export;
pub mod fairness;
pub mod reject;
pub mod report;

use thiserror::Error;

pub use downstream::{downstream_eval, DownstreamScore, LogisticModel};
pub use export::{export_for_external_eval, ExportManifest};
pub use fairness::{fairness_metrics, FairnessReport};
pub use reject::{rejection_sample, RejectionStats};
pub use report::{evaluate, EvalReport};

use crate::compile::CompileError;
use crate::schema::SchemaError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("training labels contain a single class")]
    SingleClassTrain,
    #[error("target column `{0}` is not binary")]
    NonBinaryTarget(String),
    #[error("acceptance rate {rate:.2e} is below 1e-4 after three rounds")]
    AcceptanceTooLow { rate: f64 },
    #[error("collected {accepted} of {requested} rows before the round limit (acceptance {rate:.4})")]
    RoundsExhausted { accepted: usize, requested: usize, rate: f64 },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
