use thiserror::Error;

/// Crate-wide error type. Variants follow the failure vocabulary used across
/// the library: shape/dimension problems, bad parameters, contract violations
/// between components, and IO/serialization failures from the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A numeric parameter is out of its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A caller broke an API contract (wrong arity, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Math domain error (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input data (NaN costs, negative counts, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Teacher and student were fed different distillation points.
    #[error("consistency violation: {0}")]
    Consistency(String),

    /// Distillation setup is impossible (missing teacher, width mismatch, ...).
    #[error("setup error: {0}")]
    Setup(String),

    /// Model or run configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A metric is undefined for the given inputs (e.g. empty dataset).
    #[error("undefined metric: {0}")]
    Metric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Checkpoint or dataset file does not match the documented layout.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
