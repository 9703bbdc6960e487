use alloc::string::String;

/// Errors produced by the estimators and population formulas.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix `{block}` is not positive definite (condition number {condition:.3e})")]
    NotPositiveDefinite { block: &'static str, condition: f64 },

    #[error("operation requires marginal constraints")]
    RequiresMarginal,

    #[error("value {0} is outside the domain H > 1")]
    HOutOfDomain(f64),

    #[error("zero loading vector: cannot rescale to regression constraints")]
    DegenerateSignal,

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("model is not identified: {0}")]
    NotIdentified(String),
}

pub type Result<T> = core::result::Result<T, Error>;
