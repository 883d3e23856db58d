use alloc::boxed::Box;
use alloc::string::String;

use crate::pixel::PixelTransferModel;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on axis `{axis}`: expected {expected}, found {found}")]
    ShapeMismatch { axis: &'static str, expected: usize, found: usize },
    #[error("{op}: expected a rank-{expected} tensor, found rank {found}")]
    Rank { op: &'static str, expected: usize, found: usize },
    #[error("axis `{axis}`: kernel {kernel} does not fit input {input} with padding {padding}")]
    KernelTooLarge { axis: &'static str, input: usize, kernel: usize, padding: usize },
    #[error("axis `{axis}`: {what} must be positive")]
    NonPositive { axis: &'static str, what: &'static str },
    #[error("backward called without a recorded forward context")]
    MissingContext,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("negative photodiode input {0}")]
    NegativeInput(f64),
    #[error("need at least {required} samples for {coefficients} coefficients, got {found}")]
    InsufficientSamples { required: usize, coefficients: usize, found: usize },
    #[error("design matrix is rank deficient (rank {rank} < {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },
    #[error("fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64, best: Box<PixelTransferModel> },
    #[error("layer {layer}: {reason}")]
    ShapeChain { layer: usize, reason: String },
    #[error("pip first-layer mode requires a transfer model")]
    MissingTransfer,
    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
