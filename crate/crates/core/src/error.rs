use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed embedding file: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("stale activation tape: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}{}", pair_suffix(.pair))]
    NonFinite {
        epoch: usize,
        batch: usize,
        pair: Option<(usize, usize)>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn pair_suffix(pair: &Option<(usize, usize)>) -> String {
    match pair {
        Some((a, b)) => format!(" (pair {a},{b})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
