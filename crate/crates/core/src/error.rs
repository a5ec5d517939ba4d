//! Error type shared by the core pipeline stages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// An input violated a documented precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// Point projection requested for a point at or behind the camera plane.
    #[error("point behind camera plane (z_cam = {z})")]
    BehindCamera { z: f64 },

    /// Malformed or truncated file payload; `offset` is the byte at which
    /// the problem was detected.
    #[error("format error at byte offset {offset}: {what}")]
    Format { offset: u64, what: String },

    /// Optimization produced a non-finite loss.
    #[error("optimization diverged at iteration {iteration}: {what}")]
    Optimization { iteration: usize, what: String },

    /// Uncertainty estimation failed; `primitive` identifies the offender.
    #[error("estimation error on primitive {primitive}: {what}")]
    Estimation { primitive: usize, what: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
