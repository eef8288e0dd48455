use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("backward called before any forward pass was recorded")]
    BackwardBeforeForward,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("channel mismatch on edge {edge}: producer has {produced} channels, consumer expects {expected}")]
    ChannelMismatch {
        edge: String,
        produced: usize,
        expected: usize,
    },

    #[error("rank {rank} out of range 1..={max}")]
    Rank { rank: usize, max: usize },

    #[error("mask is not binary: entry {index} = {value}")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("mask length {found} does not match channel count {expected}")]
    MaskLength { expected: usize, found: usize },

    #[error("layer `{0}` has no surviving channels")]
    DegenerateLayer(String),

    #[error("criterion `{0}` needs a non-empty scoring batch")]
    EmptyScoringBatch(&'static str),

    #[error("relevance propagation does not support `{0}`")]
    UnsupportedLrpLayer(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("training aborted at step {step}: non-finite loss")]
    TrainingDiverged { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: not a SPAD file")]
    BadMagic,

    #[error("unsupported SPAD format version {0}")]
    UnsupportedVersion(u16),

    #[error("architecture hash mismatch: file {file}, base {base}")]
    ArchitectureMismatch { file: String, base: String },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    /// Stable numeric code, distinct for each persistence failure class.
    pub fn code(&self) -> u8 {
        match self {
            Error::BadMagic => 10,
            Error::UnsupportedVersion(_) => 11,
            Error::ArchitectureMismatch { .. } => 12,
            Error::Truncated(_) => 13,
            Error::Malformed(_) => 14,
            Error::Io(_) => 15,
            Error::Manifest(_) | Error::ChannelMismatch { .. } | Error::Config(_) | Error::Schedule(_) => 2,
            _ => 1,
        }
    }
}
