use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtmError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AtmError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("task index {index} out of range for {count} memory items")]
    Routing { index: usize, count: usize },

    #[error("memory bank is frozen; updates are only permitted during training")]
    Frozen,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("stage sequencing: {op} requires stage {expected}, state is at {found}")]
    Sequencing {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite loss {value} at stage {stage}, step {step}")]
    NonFinite { stage: u8, step: usize, value: f64 },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    /// A file was read but its contents are malformed or from an
    /// incompatible version.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

impl AtmError {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        AtmError::Dimension { op, left, right }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        AtmError::Contract(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        AtmError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub(crate) fn format(path: &std::path::Path, detail: impl Into<String>) -> Self {
        AtmError::Format {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }
}
