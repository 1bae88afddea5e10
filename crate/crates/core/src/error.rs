use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("a network needs at least 2 agents, got {0}")]
    TooFewAgents(usize),

    #[error("edge ({0}, {1}) is out of range for {2} agents")]
    EdgeOutOfRange(usize, usize, usize),

    #[error("graph is not connected")]
    Disconnected,

    #[error("no connected random graph after {0} attempts (edge probability {1})")]
    RetryBudgetExhausted(usize, f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid mixing matrix: {0}")]
    InvalidMixingMatrix(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("hessian-corrected estimator requested but the problem has no Hessian-vector products")]
    MissingHessian,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
