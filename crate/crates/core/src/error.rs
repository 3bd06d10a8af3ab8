use thiserror::Error;

/// Errors produced by the targeting engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty intersection in dimension {dim}")]
    EmptyIntersection { dim: usize },

    #[error("degenerate range in dimension {dim}: [{lo}, {hi}]")]
    DegenerateRegion { dim: usize, lo: f64, hi: f64 },

    #[error("invalid interval in dimension {dim}: [{lo}, {hi}]")]
    InvalidInterval { dim: usize, lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not positive definite even after jitter")]
    NotPositiveDefinite,

    #[error("query budget exhausted ({budget} queries used)")]
    BudgetExhausted { budget: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient query budget: need {needed}, have {available}")]
    InsufficientBudget { needed: usize, available: usize },

    #[error("no feasible candidate region; widen the size constraint or abort the run")]
    NoFeasibleCandidate,

    #[error("point {point:?} is not covered by the policy")]
    PolicyNotTotal { point: Vec<f64> },

    #[error("hyperparameter fit failed: {0}")]
    FitFailed(String),

    #[error("unbalanced results: {0}")]
    UnbalancedResults(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
