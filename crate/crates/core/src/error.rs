use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("diffusion time {0} outside the allowed range")]
    TimeOutOfRange(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ode solver exceeded {max_steps} steps at l = {at}")]
    SolverDiverged { max_steps: usize, at: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error{}: {message}", config_location(*line))]
    Config { line: usize, message: String },

    #[error("training aborted at iteration {iteration}: {message}")]
    TrainingAborted { iteration: usize, message: String },
}

fn config_location(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" at line {line}")
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
