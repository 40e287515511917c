use phiflow_core::Error as CoreError;
use serde_json::json;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERDICT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID_CONFIG: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidConfig(vec![msg.into()])
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    fn is_solver(e: &CoreError) -> bool {
        match e {
            CoreError::SolverNonConvergence { .. } => true,
            CoreError::Step { source, .. } => Self::is_solver(source),
            _ => false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::InvalidConfig(_) => EXIT_INVALID_CONFIG,
            Self::Core(e) if Self::is_solver(e) => EXIT_SOLVER,
            Self::Core(CoreError::UnknownNonlinearity(_) | CoreError::ConditionViolation { .. } | CoreError::BetaAboveThreshold { .. }) => {
                EXIT_INVALID_CONFIG
            }
            Self::Core(_) => EXIT_SOLVER,
            Self::Io { .. } => EXIT_IO,
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Self::Usage(m) => json!({ "error": "usage", "message": m }),
            Self::InvalidConfig(v) => json!({ "error": "invalid-config", "violations": v }),
            Self::Core(e) => {
                let step = match e {
                    CoreError::Step { step, .. } => Some(*step),
                    _ => None,
                };
                let kind = if Self::is_solver(e) { "solver-failure" } else { "numerical-error" };
                json!({ "error": kind, "step": step, "message": e.to_string() })
            }
            Self::Io { path, source } => json!({ "error": "io", "path": path, "message": source.to_string() }),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
