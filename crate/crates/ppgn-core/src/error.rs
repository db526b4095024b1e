//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by feeder loading, simulation, training, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown switch index {0}")]
    UnknownSwitch(usize),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("non-finite value rejected in {0}")]
    NonFinite(String),
    #[error("node {0} has fewer than {1} reachable neighbors")]
    TooFewNeighbors(usize, usize),
    #[error("isolated node {0}: zero adjacency row")]
    IsolatedNode(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("infeasible grid: {0}")]
    Infeasible(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
