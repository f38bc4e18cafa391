use std::path::PathBuf;

use crate::tensor::Precision;

/// Which term of the recovery objective went non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    CrossEntropy,
    GlobalStats,
    Gradient,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossTerm::CrossEntropy => write!(f, "ce"),
            LossTerm::GlobalStats => write!(f, "d_global"),
            LossTerm::Gradient => write!(f, "gradient"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op} on axis `{axis}`: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("resolution {height}x{width} collapses the feature map to zero extent at layer `{layer}`")]
    Resolution {
        layer: String,
        height: usize,
        width: usize,
    },

    #[error("non-finite {term} (precision {precision:?})")]
    NonFinite { term: LossTerm, precision: Precision },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{context}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a location such as `stage 2, step 17`.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any `Context` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
