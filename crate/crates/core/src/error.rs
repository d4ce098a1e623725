use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("attribute index {index} out of range for vocabulary of {n} attributes")]
    Vocabulary { index: usize, n: usize },

    #[error("degenerate vector in cosine similarity (norm {norm:e})")]
    DegenerateVector { norm: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("format error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cannot sample triplets for attribute {attribute}: {reason}")]
    Sampling { attribute: String, reason: String },

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("non-finite loss at batch {batch} (triplets {triplets:?})")]
    NonFiniteLoss { batch: usize, triplets: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 for data and format
    /// problems, 3 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. }
            | Error::Parse { .. }
            | Error::Sampling { .. }
            | Error::Io { .. }
            | Error::Vocabulary { .. } => 2,
            Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::DegenerateVector { .. } => 3,
            Error::Dimension { .. } | Error::Contract(_) | Error::Spec(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
