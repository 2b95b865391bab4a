use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI's exit-code categories.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller misuse of an API contract (wrong call order, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration value or inconsistent shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values encountered where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed serialized data.
    #[error("format error in {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        message: String,
        offset: u64,
    },

    /// A required artifact (dataset, checkpoint, anchors) is missing.
    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code for the error category. Code 2 is reserved for
    /// argument-parsing usage errors as well.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) => 3,
            Error::Dependency(_) => 4,
            Error::Format { .. } => 5,
            Error::Numeric(_) => 6,
            Error::Io(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
