//! Experiment driver: corpus splits, training, evaluation metrics,
//! precision/recall curves and the external type-checker hook.

mod checker;
mod config;
mod eval;
mod split;
mod train;

use thiserror::Error;

use crate::diffkernel::KernelError;
use crate::pygraph::GraphFormatError;
use crate::typemap::TypeMapError;

pub use checker::{CheckOutcome, CheckerHook, CHECKER_TIMEOUT};
pub use config::RunConfig;
pub use eval::{
    emitted_at, evaluate, pr_curve, self_exact_match, type_counts, write_report, Counts, EvalRecord, Metrics, PrPoint, Predictor,
    SymbolSuggestion, DEFAULT_THRESHOLDS, RARE_CUTOFF,
};
pub use split::{split_corpus, Split};
pub use train::{train, Control, EpochLog, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 1 usage, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) | HarnessError::Io(_) => 2,
            HarnessError::Divergence { .. } => 3,
        }
    }
}

impl From<KernelError> for HarnessError {
    fn from(e: KernelError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<TypeMapError> for HarnessError {
    fn from(e: TypeMapError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<GraphFormatError> for HarnessError {
    fn from(e: GraphFormatError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
