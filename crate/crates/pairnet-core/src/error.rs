//! Crate-wide error type. Every fallible public operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is out of its documented range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A scene or scene graph violates a structural invariant.
    #[error("invalid scene {image_id}: {reason}")]
    Scene { image_id: String, reason: String },

    /// A binary artifact (checkpoint, precomputed queries, mask dump) is unreadable.
    #[error("corrupt binary file {path} at byte {offset}: {reason}")]
    BinaryFormat {
        path: String,
        offset: u64,
        reason: String,
    },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    /// A numeric quantity that must stay finite went NaN/inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The requested item does not exist (image id, parameter name, ...).
    #[error("not found: {0}")]
    NotFound(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn scene(image_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Scene {
            image_id: image_id.into(),
            reason: reason.into(),
        }
    }
}
