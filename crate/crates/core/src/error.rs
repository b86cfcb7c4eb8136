use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range in {what}: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("non-finite value in {what} at {index:?}")]
    NonFinite { what: &'static str, index: Vec<usize> },

    #[error("image is {height}x{width}, minimum is {min}x{min}")]
    Undersized { height: usize, width: usize, min: usize },

    #[error("shape mismatch in {what}: expected {expected:?}, got {actual:?}")]
    Shape { what: &'static str, expected: Vec<usize>, actual: Vec<usize> },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("prompt has {tokens} tokens, backbone limit is {limit}")]
    TokenLimit { tokens: usize, limit: usize },

    #[error("backbone: {0}")]
    Backbone(String),

    #[error("generation failed at t={t}: {source}")]
    Step { t: usize, source: Box<Error> },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<crate::vlad::FeatureAdapter> },

    #[error("{path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { arg, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Range { .. }
                | Error::NonFinite { .. }
                | Error::Undersized { .. }
                | Error::Shape { .. }
                | Error::InvalidArgument { .. }
                | Error::TokenLimit { .. }
        )
    }
}
