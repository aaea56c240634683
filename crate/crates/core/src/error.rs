use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate covariance (condition number {condition:.3e})")]
    DegenerateCovariance { condition: f64 },

    #[error("degenerate point set")]
    DegeneratePointSet,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid ray: direction has zero length")]
    InvalidRay,

    #[error("non-finite gradient for splat {id}")]
    NonFiniteGradient { id: u64 },

    #[error("partition epoch mismatch (worker at {worker}, task for {task})")]
    EpochMismatch { worker: u64, task: u64 },

    #[error("missing partial results for subsets {0:?}")]
    MissingPartial(Vec<usize>),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("worker {worker} timed out")]
    WorkerTimeout { worker: usize },

    #[error("worker {worker} failed: {message}")]
    WorkerFailed { worker: usize, message: String },

    #[error("resolution mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    ResolutionMismatch {
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },

    #[error("NaN loss at step {step}")]
    NanLoss { step: usize },

    #[error("splat id checksum mismatch during repartition ({before:#x} != {after:#x})")]
    ChecksumMismatch { before: u64, after: u64 },

    #[error("PLY parse error at line {line}: {message}")]
    PlyParse { line: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
