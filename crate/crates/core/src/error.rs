use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Out-of-range hyperparameter such as a dropout probability.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input count is not `outputs * branching^depth`.
    #[error(
        "structure error: {inputs} inputs over {outputs} outputs is not an exact power of branching {branching} (nearest valid input count: {nearest})"
    )]
    Structure {
        inputs: usize,
        outputs: usize,
        branching: usize,
        nearest: usize,
    },

    /// Parameters or compiled buffers that do not agree with a tree plan.
    #[error("inconsistent tree parameters: {0}")]
    Inconsistent(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error at {path}: {detail}")]
    Config { path: String, detail: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("download failed: {0}")]
    Download(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Structure { .. } | Error::Parameter(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Download(_) => 3,
            _ => 4,
        }
    }
}
