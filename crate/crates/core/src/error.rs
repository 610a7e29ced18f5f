use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad architecture, layer, or hyperparameter configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied data of the wrong shape, length, or value range.
    #[error("input error: {0}")]
    Input(String),

    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss in {stage} at iteration {iteration}")]
    NonFiniteLoss { stage: &'static str, iteration: usize },

    #[error("objective is not differentiable here: {0}")]
    NotDifferentiable(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by what the user handed us (files, flags, data)
    /// rather than by a failure inside the computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Ingestion { .. }
                | Error::Format(_)
                | Error::Weights(_)
                | Error::Io(_)
                | Error::Image(_)
                | Error::Json(_)
        )
    }
}
