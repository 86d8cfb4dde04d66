use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the CLI exit codes
/// reported by `Error::exit_code`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("vocabulary error: unknown token `{token}` in \"{prompt}\"")]
    Vocabulary { token: String, prompt: String },

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("type error loading {path}: expected role `{expected}`, found `{found}`")]
    TensorType {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("range error: {0}")]
    Range(String),

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("optimization error at step {step}: {reason}")]
    Optimization { step: usize, reason: String },

    #[error("sampling error at step {step}: {reason}")]
    Sampling { step: usize, reason: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io {
            path: PathBuf::new(),
            source,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Distinct process exit codes per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Range(_) => 2,
            Error::Vocabulary { .. } => 3,
            Error::Training { .. } | Error::Optimization { .. } => 4,
            Error::Sampling { .. } => 5,
            Error::Io { .. } | Error::Format { .. } | Error::TensorType { .. } => 6,
            Error::Shape { .. } | Error::DegenerateRegion(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
