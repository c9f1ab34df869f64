use thiserror::Error;

/// Error type shared by all numeric operations in this crate.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("{op}: non-finite values in input")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

impl CoreError {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
