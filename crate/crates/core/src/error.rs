use std::path::PathBuf;

/// Errors emitted by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed line: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}:{line}: index out of bounds: {msg}")]
    IndexOutOfBounds { path: PathBuf, line: usize, msg: String },

    #[error("{path}:{line}: zero count stored explicitly")]
    ZeroCount { path: PathBuf, line: usize },

    #[error("{path}:{line}: duplicate entry for cell {cell}, gene {gene}")]
    DuplicateEntry { path: PathBuf, line: usize, cell: usize, gene: usize },

    #[error("unknown {category} label {label:?} (not in annotation schema)")]
    UnknownLabel { category: String, label: String },

    #[error("duplicate gene id {0:?}")]
    DuplicateGeneId(String),

    #[error("duplicate cell id {0:?}")]
    DuplicateCellId(String),

    #[error("cell has zero total count")]
    ZeroTotalCount,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty cell: no non-zero genes")]
    EmptyCell,

    #[error("integrity check failed: expected digest {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("network error fetching {url}: {msg}")]
    Network { url: String, msg: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shard record {ordinal}: {msg}")]
    ShardCorrupt { ordinal: usize, msg: String },

    #[error("shard version mismatch: expected {expected}, found {found}")]
    ShardVersion { expected: u32, found: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("learning-rate schedule: step {step} out of range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("donor overlap between corpora: {0:?}")]
    DonorOverlap(Vec<String>),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
