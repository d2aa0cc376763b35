//! Predictive metrics, faithfulness tests, the fusion consensus experiment,
//! paired statistics and text metrics.

pub mod consensus;
pub mod faithfulness;
mod metrics;
pub mod stats;
pub mod text;

use thiserror::Error;

pub use consensus::{consensus_experiment, ConsensusInstance, ConsensusReport};
pub use faithfulness::{deletion_test, sensitivity_test, FaithfulnessCurve, DEFAULT_FRACTIONS};
pub use metrics::{classification_metrics, regression_metrics, ClassificationMetrics, RegressionMetrics};
pub use stats::{bootstrap_mean_ci, sign_test, wilcoxon_signed_rank, Interval, Wilcoxon};
pub use text::{bleu4, flesch_kincaid, rouge_l, tokenize, RougeL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("inputs have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Numeric(#[from] crate::tensor::NumericError),
}

pub type Result<T> = std::result::Result<T, EvalError>;
