use std::path::PathBuf;

/// Errors produced by the library. Every variant carries enough context to
/// name the offending item (sample, attribute, parameter, file).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("attributes with empty base-class support: {0:?}")]
    EmptyAttributeSupport(Vec<u32>),

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("unknown attribute id {0}")]
    UnknownAttribute(u32),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("stale or mismatched tape: {0}")]
    StaleTape(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("knowledge file {field}: {message}")]
    Knowledge { field: String, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("payload {path} truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("checksum mismatch for {path}: manifest {expected}, payload {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyAttributeSupport(_) => "empty_attribute_support",
            Error::UnknownClass(_) => "unknown_class",
            Error::UnknownAttribute(_) => "unknown_attribute",
            Error::ZeroNorm(_) => "zero_norm",
            Error::NonFinite(_) => "non_finite",
            Error::StaleTape(_) => "stale_tape",
            Error::Insufficient(_) => "insufficient_data",
            Error::Knowledge { .. } => "knowledge",
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
