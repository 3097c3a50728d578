use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree along `axis`.
    #[error("dimension mismatch in {op}: axis {axis} is {found}, expected {expected}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error: missing key `{key}` in {context}")]
    Schema { key: String, context: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("i/o error on {path}: {source}")]
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

    /// Process exit code: 2 config/precondition, 3 data/integrity, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Precondition(_) | Error::Io { .. } => 2,
            Error::Data(_)
            | Error::Schema { .. }
            | Error::Parse { .. }
            | Error::Integrity(_) => 3,
            Error::Numerical(_) => 4,
            Error::Dimension { .. } | Error::Contract(_) | Error::Oracle(_) => 2,
        }
    }
}
