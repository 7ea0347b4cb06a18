use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed trace record: {message}")]
    Parse { line: usize, message: String },

    #[error("trace {trace_id}: {message}")]
    Validation { trace_id: String, message: String },

    #[error("span {span_id}: {message}")]
    Featurize { span_id: String, message: String },

    #[error("embedding sidecar is missing {} text(s): {}", .missing.len(), .missing.join(", "))]
    MissingEmbeddings { missing: Vec<String> },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("numerical divergence ({context}); try a smaller learning rate")]
    Divergence { context: String },

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn divergence(context: impl Into<String>) -> Self {
        Error::Divergence {
            context: context.into(),
        }
    }
}
