//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("matmul inner dimensions disagree: {lhs:?} vs {rhs:?}")]
    InnerDimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        padded: Vec<usize>,
    },

    #[error("channels {channels} not divisible by groups {groups}")]
    BadGroupCount { channels: usize, groups: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("volume extent {extent:?} smaller than grid {grid:?}")]
    VolumeSmallerThanGrid {
        extent: Vec<usize>,
        grid: Vec<usize>,
    },

    #[error("inconsistent patch shapes: {0:?} vs {1:?}")]
    InconsistentPatches(Vec<usize>, Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter {name} already built with shape {have:?}, requested {want:?}")]
    ParamShape {
        name: String,
        have: Vec<usize>,
        want: Vec<usize>,
    },

    #[error("class {class} has only {count} samples (need >= 2)")]
    ClassTooSmall { class: usize, count: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },

    #[error("extent overflow: {0:?}")]
    ExtentOverflow(Vec<u64>),

    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("gradient check failed: {family} at relative error {err:.3e}")]
    GradCheckFailed { family: String, err: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
