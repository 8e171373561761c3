use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Config`, `Ingest`, and `Shape` are validation failures (exit 2),
/// `Numerical` is a training/evaluation abort (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus ingestion failed ({path}): {message}")]
    Ingest { path: String, message: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("numerical abort at {location}: {detail}")]
    Numerical { location: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn ingest(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn numerical(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            location: location.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
