use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("operation {op} is not differentiable; annotate it with a straight-through rule")]
    NonDifferentiable { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probability table violates its invariant: {0}")]
    InvalidTable(String),

    #[error("support violation: q({index}) = {q} > 0 but p({index}) = 0")]
    Support { index: usize, q: f64 },

    #[error("state space of {states} sequences exceeds the enumeration limit {limit}")]
    StateSpaceTooLarge { states: u128, limit: usize },

    #[error("degenerate particle cloud: fitted standard deviation {0:e}")]
    DegenerateCloud(f64),

    #[error("non-finite loss at step {step}: {detail}")]
    NumericalAbort { step: u64, detail: String },

    #[error("truncated file {path}: {len} bytes is not a multiple of {record} (incomplete record at byte offset {offset})")]
    Truncated { path: PathBuf, len: u64, record: usize, offset: u64 },

    #[error("no files matching {pattern} in {dir}")]
    MissingFiles { dir: PathBuf, pattern: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed metrics line {line}: {detail}")]
    Metrics { line: usize, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
