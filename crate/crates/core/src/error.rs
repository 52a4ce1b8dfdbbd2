use thiserror::Error;

/// Errors produced anywhere in the audit toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("split constraint `{constraint}` failed: {detail}")]
    Split {
        constraint: &'static str,
        detail: String,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("fingerprint mismatch: expected {expected}, computed {computed}")]
    Fingerprint { expected: String, computed: String },

    #[error("feature layout mismatch: {0}")]
    Layout(String),

    #[error(
        "feature set `{feature_set}` needs {required} access to the model, \
         but only grey-box output log-probabilities are available"
    )]
    AccessLevel {
        feature_set: String,
        required: &'static str,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 configuration, 3 data or format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Split { .. } | Error::AccessLevel { .. } => 2,
            Error::Numerical(_) => 4,
            Error::ShapeMismatch { .. }
            | Error::NonScalarLoss(_)
            | Error::Format { .. }
            | Error::Fingerprint { .. }
            | Error::Layout(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
