use thiserror::Error;

pub type Result<T> = std::result::Result<T, GcldrError>;

#[derive(Debug, Error)]
pub enum GcldrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("batchnorm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("degenerate posterior in row {row}")]
    DegeneratePosterior { row: usize },

    #[error("training diverged at {context}")]
    Divergence { context: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GcldrError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        GcldrError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        GcldrError::Config(msg.into())
    }
}
