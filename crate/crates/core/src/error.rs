use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("character {ch:?} at {path}:{line} is not in the charset")]
    UnknownChar { path: PathBuf, line: usize, ch: char },

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("operation not available in {mode} mode: {what}")]
    Mode { mode: &'static str, what: String },

    #[error("infeasible CTC alignment: label of length {label_len} needs {required} frames, got {frames}")]
    InfeasibleAlignment {
        frames: usize,
        label_len: usize,
        required: usize,
    },

    #[error("instance too large: {0}")]
    Size(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
