//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! specific enough that callers (and tests) can distinguish a corrupt file
//! header from a truncated payload or a shape mismatch without string
//! matching.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a contract) disagree on shape.
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Tensors are limited to ranks 1 through 4.
    #[error("tensor rank {rank} is unsupported (expected 1..=4)")]
    RankOutOfRange { rank: usize },

    /// Flat buffer length does not match the product of the extents.
    #[error("data length {got} does not match shape {shape:?} (expected {expected} values)")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("{context}: non-finite value at flat index {index}")]
    NonFinite { context: &'static str, index: usize },

    /// A segmentation label or edge endpoint exceeds the region count.
    #[error("label {label} out of range for {regions} regions")]
    LabelOutOfRange { label: usize, regions: usize },

    /// Scalar argument outside its documented domain.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Tensor file does not start with the `GLT1` magic bytes.
    #[error("bad magic bytes {found:?} (expected \"GLT1\")")]
    BadMagic { found: [u8; 4] },

    /// Tensor file ends before the declared payload is complete.
    #[error("truncated payload: expected {expected} more bytes, found {got}")]
    TruncatedPayload { expected: usize, got: usize },

    /// Tensor file has bytes left over after the declared payload.
    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: usize },

    /// PPM/PGM parse or encode failure.
    #[error("image format error: {reason}")]
    Image { reason: String },

    /// Requested intermediate stage name does not exist.
    #[error("unknown stage {name:?}; available stages: {available}")]
    UnknownStage { name: String, available: String },

    /// An error that occurred inside a named pipeline stage.
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Configuration file could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps the error with the pipeline stage it occurred in.
    pub fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

/// Extension trait for tagging errors with the pipeline stage they came from.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
