use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("exponential overflow: exponent {exponent:.3} exceeds {limit}")]
    Overflow { exponent: f64, limit: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
