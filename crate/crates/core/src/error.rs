use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("could not place object {object} after {attempts} attempts")]
    PlacementFailure { object: usize, attempts: usize },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("the data-dependent prior needs per-image context")]
    MissingContext,

    #[error("{n_gt} ground-truth objects exceed n_train = {n_train}")]
    TooManyObjects { n_gt: usize, n_train: usize },

    #[error("invalid cost matrix: {0}")]
    InvalidCostMatrix(String),

    #[error("strategy {0} has no pairwise cost")]
    InvalidStrategy(String),

    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },

    #[error("config errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
