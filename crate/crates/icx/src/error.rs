//! Error taxonomy shared by the library and the CLI.
//!
//! Every variant maps to a process exit code so scripted callers can
//! distinguish misuse from bad data from numeric faults.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Command line misuse: unknown flags, missing required arguments.
    #[error("usage: {0}")]
    Usage(String),

    /// A configuration file or override that parses but cannot be honored.
    #[error("config: {0}")]
    Config(String),

    /// Input data that is malformed or violates a documented contract.
    #[error("data: {0}")]
    Data(String),

    /// Filesystem failure, always with the offending path.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A caption word outside the fixed vocabulary.
    #[error("vocab: {0}")]
    Vocab(String),

    /// Tensor or token geometry mismatch.
    #[error("shape: {0}")]
    Shape(String),

    /// Non-finite values or other numeric faults.
    #[error("numeric: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this failure class. 0 is success, 1 is
    /// reserved for panics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) => 3,
            Error::Data(_) | Error::Io { .. } | Error::Vocab(_) => 4,
            Error::Shape(_) | Error::Numeric(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
