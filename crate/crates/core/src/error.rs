use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("condition ({condition}) violated: {detail}")]
    ConditionViolation {
        condition: &'static str,
        detail: String,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: operation requires d={required}, grid has d={actual}")]
    DimensionMismatch { required: usize, actual: usize },

    #[error("prox solver did not converge after {iterations} iterations (residual {residual:.3e}, target {target:.3e})")]
    SolverNonConvergence {
        iterations: usize,
        residual: f64,
        target: f64,
    },

    #[error("step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("beta={beta} exceeds the admissible threshold beta*={beta_star}")]
    BetaAboveThreshold { beta: f64, beta_star: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("missing observable `{0}` in trajectory")]
    MissingObservable(String),

    #[error("empty sample stream")]
    EmptyStream,

    #[error("unknown nonlinearity id `{0}`")]
    UnknownNonlinearity(String),

    #[error("malformed field data: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
