use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("cannot broadcast shapes {lhs:?} and {rhs:?}")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("matmul inner extents differ: {lhs:?} x {rhs:?}")]
    InnerExtent { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid axes {axes:?} for rank {rank}")]
    InvalidAxis { axes: Vec<usize>, rank: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("channel mismatch in {context}: expected {expected}, got {actual}")]
    ChannelMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label value {value} at voxel {index}")]
    InvalidLabel { value: u8, index: usize },

    #[error("volume has no non-zero voxels")]
    EmptyVolume,

    #[error("channel {channel} has zero standard deviation")]
    DegenerateChannel { channel: usize },

    #[error("epoch {epoch} outside schedule range [0, {total})")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("need at least {needed} cases, got {got}")]
    TooFewCases { needed: usize, got: usize },

    #[error("extent mismatch: {lhs:?} vs {rhs:?}")]
    ExtentMismatch { lhs: [usize; 3], rhs: [usize; 3] },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("batch-norm statistics for `{layer}` were never computed")]
    UninitializedStats { layer: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
