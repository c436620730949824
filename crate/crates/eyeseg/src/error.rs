//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by grid construction, loss evaluation, metric
/// computation, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} in {what} at (c={channel}, y={y}, x={x})")]
    NonFinite {
        what: &'static str,
        value: f64,
        channel: usize,
        y: usize,
        x: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("label {value} at (y={y}, x={x}) is not a valid class index (classes: {classes})")]
    InvalidLabel {
        value: u8,
        y: usize,
        x: usize,
        classes: usize,
    },

    #[error("probability {value} out of [0, 1] at (c={channel}, y={y}, x={x})")]
    ProbabilityRange {
        value: f64,
        channel: usize,
        y: usize,
        x: usize,
    },

    #[error("channel probabilities at (y={y}, x={x}) sum to {sum}, expected 1 within {tolerance}")]
    ProbabilitySum { y: usize, x: usize, sum: f64, tolerance: f64 },

    #[error("ground truth is not one-hot at (y={y}, x={x})")]
    NotOneHot { y: usize, x: usize },

    #[error("probability map has {channels} channels; sclera/iris/pupil constraints need at least 4")]
    MissingConstraintChannels { channels: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient data: {what} needs at least {needed}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("geometry violates '{condition}'")]
    InvalidGeometry { condition: String },

    #[error("corruption pushes {shape} out of bounds")]
    OutOfBounds { shape: &'static str },

    #[error("optimization diverged at iteration {iteration} (step size {step_size})")]
    Diverged { iteration: usize, step_size: f64 },

    #[error("analytic gradient disagrees with finite differences (max relative error {max_rel_error:.3e} at coordinate {coordinate})")]
    GradientMismatch { max_rel_error: f64, coordinate: usize },

    #[error("validation: {0}")]
    Validation(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
