use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tensors and autodiff
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any tracked tensor")]
    NoTape,

    // layers and blocks
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("kernel {kernel} exceeds input extent {extent}")]
    KernelTooLarge { kernel: usize, extent: usize },
    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("spatial mismatch: {0}")]
    SpatialMismatch(String),
    #[error("inner path changes shape from {input:?} to {output:?}")]
    ShapeChange { input: Vec<usize>, output: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // preprocessing
    #[error("median window must be odd and positive, got {0}")]
    EvenWindow(usize),

    // model
    #[error("input size {input_size} too small: {stage} would have spatial size {size}")]
    ShapeUnderflow { input_size: usize, stage: String, size: i64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint truncated")]
    TruncatedFile,
    #[error("checkpoint does not match model config: {0}")]
    ShapeConflict(String),

    // training and metrics
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {0} has too few samples to populate both splits")]
    EmptyClass(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,

    // data and cli
    #[error("missing class directory {0}")]
    MissingClassDir(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the failure stems from bad input data (as opposed to bad usage).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingClassDir(_)
                | Error::UnreadableImage { .. }
                | Error::EmptyClass(_)
                | Error::BadMagic(_)
                | Error::VersionMismatch(_)
                | Error::TruncatedFile
                | Error::ShapeConflict(_)
                | Error::Io(_)
        )
    }
}
