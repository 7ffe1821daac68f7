use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tensor contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("operation needs a non-empty tensor")]
    EmptyTensor,
    #[error("matrix is singular (pivot {pivot:e} below threshold {threshold:e})")]
    Singular { pivot: f64, threshold: f64 },
    #[error("SVD failed to converge after {0} sweeps")]
    NonConvergence(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("kurtosis undefined: sample has (near) zero variance")]
    DegenerateSample,
    #[error("kurtosis needs at least two values, got {0}")]
    TooFewValues(usize),

    #[error("unsupported bit width {0} (expected 4, 6, 8 or 16)")]
    InvalidBits(u32),
    #[error("zero quantization range for non-zero data")]
    ZeroRange,
    #[error("smoothing strength {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("non-positive statistic after flooring")]
    NonPositiveStat,
    #[error("calibration statistics missing for site `{0}`")]
    MissingStats(String),
    #[error("empty sample")]
    EmptySample,

    #[error("configs of the two checkpoints differ: {0}")]
    ConfigMismatch(String),
    #[error("non-singularity assumption violated: {0}")]
    NonSingularityViolated(String),
    #[error("adapter rank {rank} below required {required}")]
    RankConditionViolated { rank: usize, required: usize },
    #[error("adapter target `{0}` not found in checkpoint")]
    TargetMissing(String),

    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid character {0:?} in sequence (expected A, C, G or T)")]
    InvalidCharacter(char),
    #[error("unknown token id {0}")]
    UnknownId(usize),

    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("checkpoint already uses Softmax1 attention")]
    AlreadyOutlierFree,
    #[error("dataset contains a single class")]
    SingleClassDataset,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the filesystem rather than of the computation.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
