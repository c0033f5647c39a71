use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`{context}")]
    Numeric { op: String, context: String },

    #[error("{what}: size {got} exceeds limit {limit}")]
    Size {
        what: String,
        got: usize,
        limit: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn size(what: impl Into<String>, got: usize, limit: usize) -> Self {
        Error::Size {
            what: what.into(),
            got,
            limit,
        }
    }

    /// Attaches extra context (such as an iteration index) to a numeric error.
    pub fn with_numeric_context(self, context: impl Into<String>) -> Self {
        match self {
            Error::Numeric { op, .. } => Error::Numeric {
                op,
                context: format!(" ({})", context.into()),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
