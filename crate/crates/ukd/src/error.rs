//! Crate-wide error type.
//!
//! Every fallible public function returns [`Result`]. Variants are grouped by
//! failure class rather than by module so CLI output can map them to stable
//! machine-readable kinds.

use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum UkdError {
    /// Tensor or grid shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is out of its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Input is structurally valid but numerically unusable
    /// (zero-norm vector, empty bag, single-class AUC, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A documented call contract was violated (e.g. an unnormalized
    /// distribution passed where probabilities are required).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Run configuration is inconsistent (unknown keys, missing teacher
    /// entries with nonzero weight, unsupported preset, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A metric is undefined on the given data.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A statistical test is undefined on the given data.
    #[error("undefined test: {0}")]
    UndefinedTest(String),

    /// A model/task matrix has missing cells.
    #[error("incomplete benchmark: {0}")]
    IncompleteBenchmark(String),

    /// Resampling kept producing degenerate replicates.
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    /// A serialized artifact failed validation (bad magic, CRC, truncation).
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// A serialized artifact has an unsupported format version.
    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    /// Training produced a non-finite loss and stopped.
    /// `last_checkpoint` names the most recent good checkpoint, if any.
    #[error("training aborted: non-finite {component} loss at step {step}")]
    TrainingAborted {
        component: String,
        step: u64,
        last_checkpoint: Option<std::path::PathBuf>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl UkdError {
    /// Stable machine-readable kind tag used by the CLI error object.
    pub fn kind(&self) -> &'static str {
        match self {
            UkdError::Dimension(_) => "dimension",
            UkdError::Parameter(_) => "parameter",
            UkdError::Degenerate(_) => "degenerate_input",
            UkdError::Contract(_) => "contract_violation",
            UkdError::Config(_) => "config",
            UkdError::UndefinedMetric(_) => "undefined_metric",
            UkdError::UndefinedTest(_) => "undefined_test",
            UkdError::IncompleteBenchmark(_) => "incomplete_benchmark",
            UkdError::DegenerateDataset(_) => "degenerate_dataset",
            UkdError::Corrupt(_) => "corrupt_file",
            UkdError::VersionMismatch(_) => "version_mismatch",
            UkdError::TrainingAborted { .. } => "training_aborted",
            UkdError::Io(_) => "io",
            UkdError::Csv(_) => "csv",
            UkdError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, UkdError>;
