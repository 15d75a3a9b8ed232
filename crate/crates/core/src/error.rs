use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("point outside the phase domain: {0}")]
    OutOfDomain(String),
    #[error("integration step failure: {0}")]
    StepFailure(String),
    #[error("time {t} outside trajectory window [{lo}, {hi}]")]
    WindowExceeded { t: f64, lo: f64, hi: f64 },
    #[error("characteristic chain exceeded {budget} hops")]
    ChainOverflow { budget: usize },
    #[error("degenerate face velocity {0:e}")]
    DegenerateVelocity(f64),
    #[error("sampled lower velocity bound K2 = {0} is not positive")]
    NonpositiveK2(f64),
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("Picard iteration did not converge: residual {residual:e} after {iterations} iterations (tolerance {tolerance:e})")]
    NoConvergence {
        residual: f64,
        iterations: usize,
        tolerance: f64,
    },
    #[error("bound violation: {0}")]
    BoundViolation(String),
    #[error("invalid test function: {0}")]
    InvalidTestFunction(String),
    #[error("CFL violation: number {0}")]
    CflViolation(f64),
    #[error("non-finite state: {0}")]
    NonfiniteState(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

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

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidConfig(e.to_string())
    }
}
