use std::path::PathBuf;

/// Errors produced anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: String,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Numeric { epoch: usize, batch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("failed to ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Label { .. } => "label",
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Data(_) => "data",
            Error::Numeric { .. } => "numeric",
            Error::Format(_) => "format",
            Error::Corrupt(_) => "corrupt",
            Error::Version { .. } => "version",
            Error::Ingestion { .. } => "ingestion",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(op: &str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op: op.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
