use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // IDX parsing
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: item count {found} does not match {expected}")]
    CountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: file truncated (need {needed} bytes, have {available})")]
    TruncatedFile {
        path: PathBuf,
        needed: usize,
        available: usize,
    },
    #[error("{path}: unsupported image dimensions {rows}x{cols}")]
    BadDimensions { path: PathBuf, rows: usize, cols: usize },
    #[error("digit pool has no bitmaps for digit {0}")]
    MissingDigitClass(u8),

    // generation
    #[error("cannot reach complexity {target} exactly")]
    UnreachableComplexity { target: usize },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,

    // encoders
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),

    // mapping / vlm numerics
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    // assignment
    #[error("score vector is empty")]
    EmptyScores,
    #[error("dangling reference: {0}")]
    DanglingReference(String),

    // vlm
    #[error("variant {variant} cannot train on this input: {reason}")]
    VariantInputMismatch { variant: String, reason: String },
    #[error("encoder hash mismatch: artifact built with {expected:016x}, encoder is {found:016x}")]
    EncoderMismatch { expected: u64, found: u64 },

    // eval
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("k = {k} exceeds ranking length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),

    // pipeline
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("config hash mismatch for {artifact}: recorded {recorded}, current config gives {current}")]
    ConfigHashMismatch {
        artifact: String,
        recorded: String,
        current: String,
    },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data error, 3 numerical error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteGradient(_) => 3,
            Error::Config(_) | Error::InvalidConfig(_) => 1,
            _ => 2,
        }
    }
}
