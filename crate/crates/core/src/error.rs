use thiserror::Error;

/// Errors raised by the attention, filtering and simulation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unsupported bit width {0} (expected 2, 4 or 16)")]
    UnsupportedBits(u32),

    #[error("value {0} outside the signed 4-bit range [-8, 7]")]
    OutOfRange(i32),

    #[error("previous-round scores do not align with the candidate set")]
    Misaligned,

    #[error("{buffer} overflow: need {required} bytes, capacity {capacity}")]
    BufferOverflow {
        buffer: &'static str,
        required: u64,
        capacity: u64,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
