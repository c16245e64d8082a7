use std::io;

use thiserror::Error;

/// Errors produced anywhere in the prognosis stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("blank image")]
    BlankImage,

    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn csv(source: csv::Error) -> Self {
        Error::format("csv", source.to_string())
    }
}
