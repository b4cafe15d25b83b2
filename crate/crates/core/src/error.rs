use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum DcpError {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("graph is disconnected")]
    Disconnected,

    #[error("erdos-renyi graph still disconnected after {attempts} attempts")]
    ConnectivityAttemptsExhausted { attempts: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("{path}:{line}: column `{column}`: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        reason: String,
    },

    #[error("root-find did not converge{}", node.map(|k| format!(" at node {k}")).unwrap_or_default())]
    NoConvergence { node: Option<usize> },

    #[error("reference ADMM run did not converge within {iterations} iterations; increase c or mu")]
    ReferenceNotConverged { iterations: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DcpError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> DcpError {
    DcpError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
