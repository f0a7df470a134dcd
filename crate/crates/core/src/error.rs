use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label error: {0}")]
    Label(String),

    #[error("label schema error: {0}")]
    LabelSchema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("alignment error: history keys have {keys} rows but values have {values}")]
    Alignment { keys: usize, values: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("non-finite loss at step {step}")]
    Numerical { step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Checkpoint(_)
            | Error::Label(_)
            | Error::LabelSchema(_) => 3,
            Error::SchemaMismatch(_) => 4,
            Error::Numerical { .. } => 5,
            Error::Contract(_) | Error::Alignment { .. } | Error::Training(_) => 1,
        }
    }
}
