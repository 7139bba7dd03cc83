use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward needs a scalar output of shape [1], got {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("parameter channel {channel} out of range [0, 1]: {value}")]
    ParamRange { channel: usize, value: f64 },

    #[error("brow style {index} outside [0, {styles})")]
    BrowStyle { index: usize, styles: usize },

    #[error("unknown character style {0}")]
    UnknownStyle(usize),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
