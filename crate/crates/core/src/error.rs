use thiserror::Error;

/// Errors surfaced by the registration pipeline.
#[derive(Debug, Error)]
pub enum CrftError {
    /// A tensor operation received incompatible shapes. The message names
    /// the operation and the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced or received a NaN/Inf value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `backward` was called on a non-scalar node or on a consumed tape.
    #[error("autodiff misuse: {0}")]
    Autodiff(String),

    /// A loss or metric was asked to reduce over an empty valid set.
    #[error("empty valid-pixel set: {0}")]
    EmptyMask(String),

    /// Malformed on-disk data (bad magic, truncated payload, bad manifest).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CrftError>;

impl CrftError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CrftError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CrftError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
