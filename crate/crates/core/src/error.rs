use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for a tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("slice [{start}, {start}+{width}) out of bounds for axis of length {len}")]
    Bounds { start: usize, width: usize, len: usize },

    #[error("dropout rate {0} outside [0, 1)")]
    Rate(f64),

    #[error("slice width {width} invalid for layer width {layer_width}")]
    Width { width: usize, layer_width: usize },

    #[error("index error: {0}")]
    Index(String),

    #[error("label {label} outside class range 0..{classes}")]
    Label { label: usize, classes: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("optimizer state mismatch: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
