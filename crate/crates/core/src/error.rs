use thiserror::Error;

#[derive(Debug, Error)]
pub enum CedarError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("index {index} out of range for dimension {dim}")]
    Index { index: usize, dim: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A binary file failed validation; `field` names the offending header
    /// entry or payload section.
    #[error("malformed file ({field}): {detail}")]
    Format { field: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("target FVU {target} unreachable, closest achieved {closest}")]
    Unreachable { target: f64, closest: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
}

pub type Result<T> = std::result::Result<T, CedarError>;

pub(crate) fn dim_err(what: impl Into<String>) -> CedarError {
    CedarError::Dimension(what.into())
}
