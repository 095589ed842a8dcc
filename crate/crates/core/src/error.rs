//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by the segmentation core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or map shapes do not line up for the requested operation.
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },
    /// An argument violates the operation's contract.
    InvalidArgument {
        context: &'static str,
        detail: String,
    },
    /// A label value falls outside the class taxonomy.
    InvalidLabel { value: u8, n_classes: usize },
    /// A modality mask with no available modality.
    EmptyModalityMask,
    /// The requested modality is masked out or absent.
    MissingModality { index: usize },
    /// Normalization requires a non-constant channel.
    ConstantChannel { channel: usize },
    /// Phantom geometry failed to place every class within the retry bound.
    GeometryRetriesExhausted { attempts: usize },
    /// Weighted patch sampling requires at least one lesion pixel.
    LesionFreeSample,
    /// `backward` requires a scalar seed.
    NonScalarSeed { shape: Vec<usize> },
    /// `backward` was already run on this graph.
    BackwardAlreadyRun,
    /// A gradient contained NaN or infinity; the step was aborted.
    NonFiniteGradient { param: String },
    /// Too few samples to honor the split ratios.
    DatasetTooSmall { n: usize, detail: String },
    /// A batch sample has the wrong kind, mask, or visible annotations.
    WrongSampleKind { expected: &'static str, got: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::InvalidArgument { context, detail } => {
                write!(f, "invalid argument in {context}: {detail}")
            }
            Error::InvalidLabel { value, n_classes } => {
                write!(f, "label {value} outside taxonomy of {n_classes} classes")
            }
            Error::EmptyModalityMask => write!(f, "modality mask has no available modality"),
            Error::MissingModality { index } => write!(f, "modality {index} is not available"),
            Error::ConstantChannel { channel } => {
                write!(f, "channel {channel} is constant and cannot be normalized")
            }
            Error::GeometryRetriesExhausted { attempts } => {
                write!(
                    f,
                    "phantom geometry left a class empty after {attempts} attempts"
                )
            }
            Error::LesionFreeSample => {
                write!(
                    f,
                    "weighted patch sampling needs a sample with lesion pixels"
                )
            }
            Error::NonScalarSeed { shape } => {
                write!(f, "backward seed must be scalar, got shape {shape:?}")
            }
            Error::BackwardAlreadyRun => write!(f, "backward was already run on this graph"),
            Error::NonFiniteGradient { param } => {
                write!(
                    f,
                    "non-finite gradient for parameter '{param}'; step aborted"
                )
            }
            Error::DatasetTooSmall { n, detail } => {
                write!(f, "dataset of {n} samples is too small: {detail}")
            }
            Error::WrongSampleKind { expected, got } => {
                write!(f, "batch expects {expected} samples, got {got}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_mismatch(context: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        context,
        detail: detail.into(),
    }
}

pub(crate) fn invalid_argument(context: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        context,
        detail: detail.into(),
    }
}
