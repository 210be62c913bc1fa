//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model input: {0}")]
    ModelInput(String),

    #[error("ODE integration failed: {0}")]
    Integration(String),

    #[error("network definition invalid: {0}")]
    Network(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("problem construction failed: {0}")]
    ProblemBuild(String),

    #[error("conic solver numerical failure: {0}")]
    SolverFailure(String),

    #[error("parameter set is empty")]
    EmptyParamSet,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
