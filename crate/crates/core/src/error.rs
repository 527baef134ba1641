use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the synthesis stack.
///
/// Each variant belongs to a coarse category (see [`Error::category`]) that the
/// command-line front end maps onto a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: operand `{operand}` expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        operand: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("parameter `{0}` is trainable but has no gradient since the last zero_grad")]
    IncompleteBackward(String),

    #[error("word id {id} is outside the vocabulary (size {size})")]
    Vocabulary { id: usize, size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Training { iteration: usize, detail: String },

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("missing artifact {path}: run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error families, used for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Numeric,
    Config,
    Data,
    Training,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Training => 5,
            ErrorCategory::Io => 6,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Dimension { .. }
            | Error::NonFinite(_)
            | Error::EmptyInput(_)
            | Error::IncompleteBackward(_)
            | Error::UndefinedSimilarity => ErrorCategory::Numeric,
            Error::Config(_) | Error::MissingArtifact { .. } => ErrorCategory::Config,
            Error::Vocabulary { .. } | Error::Format { .. } => ErrorCategory::Data,
            Error::Training { .. } => ErrorCategory::Training,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn dim(
        op: &'static str,
        operand: &'static str,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Dimension {
            op,
            operand,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
