use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGradient(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, shapes: &[&[usize]]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    })
}
