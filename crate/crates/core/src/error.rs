//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"FVF1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported rank {0}, expected 1 or 2")]
    BadRank(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingData { extra: u64 },
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("record {line} has an empty {field}")]
    EmptyField { line: usize, field: &'static str },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {0} of the negative mask has no positive entry")]
    MaskRowAllOnes(usize),
    #[error("zero-norm vector: cosine similarity undefined")]
    ZeroVector,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid distribution in row {row}: {reason}")]
    InvalidDistribution { row: usize, reason: String },
    #[error("function evaluation returned a non-finite value")]
    NonFiniteEvaluation,

    #[error("too few points: {points} points for {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("kc ({kc}) must be at least n ({n})")]
    KcSmallerThanN { kc: usize, n: usize },
    #[error("query {0} is not in the manifest")]
    UnknownQuery(usize),
    #[error("zero-norm frame {frame} in sequence {sequence:?}")]
    ZeroNormFrame { sequence: String, frame: usize },
    #[error("no features loaded for id {0:?}")]
    MissingFeature(String),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unit {unit} is outside the vocabulary of size {vocab}")]
    UnitOutOfVocab { unit: u32, vocab: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for environment failures (exit code 2), false for validation failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
