use std::path::PathBuf;

use crate::denoiser::{AttnKind, Branch};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which leg of the fused (foreground/background) attention failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskLeg {
    Single,
    Foreground,
    Background,
}

impl std::fmt::Display for MaskLeg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskLeg::Single => f.write_str("mask"),
            MaskLeg::Foreground => f.write_str("foreground mask M^f"),
            MaskLeg::Background => f.write_str("background mask M^b"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate {leg}: row {row} has no visible key")]
    DegenerateMask { leg: MaskLeg, row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("hook contract violated at {branch:?}/step {step}/layer {layer}/{kind:?}: {detail}")]
    HookContract {
        branch: Branch,
        step: usize,
        layer: usize,
        kind: AttnKind,
        detail: String,
    },

    #[error("schedule index out of range: {0}")]
    ScheduleIndex(String),

    #[error("non-finite latent at step {step}")]
    NonFinite { step: usize },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("missing frame {index} in {dir}")]
    MissingFrame { dir: PathBuf, index: usize },

    #[error("invalid video: {0}")]
    Video(String),

    #[error("tensor container: {0}")]
    Container(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
