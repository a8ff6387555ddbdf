use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("image {height}x{width} is below the {min}x{min} minimum")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("payload of {requested} bits exceeds codec capacity of {max} bits")]
    Capacity { requested: usize, max: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("payload length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("clustering collapsed to an empty cluster after {attempts} re-initialisations")]
    DegenerateClustering { attempts: usize },

    #[error("codec `{0}` did not converge during training and cannot be used")]
    NotConverged(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite activation in feature stack")]
    NonFiniteFeatures,

    #[error("weights file {path}: {detail}")]
    Weights { path: PathBuf, detail: String },

    #[error("state file: {0}")]
    State(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
