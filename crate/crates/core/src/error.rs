use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs={lhs:?} rhs={rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("conv2d: unsupported kernel size {0}, expected 1 or 3")]
    UnsupportedKernel(usize),

    #[error("batch norm: negative variance {value} in channel {channel}")]
    NegativeVariance { channel: usize, value: f64 },

    #[error("bilinear upsample: factor must be at least 1")]
    ZeroFactor,

    #[error("patch size {p} does not divide extents {h}x{w}")]
    PatchDivisibility { h: usize, w: usize, p: usize },

    #[error("geometry {h}x{w} does not cover {n} tokens")]
    Geometry { h: usize, w: usize, n: usize },

    #[error("invalid attention parameters: {0}")]
    AttentionParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The message embeds the inner error, so it is not exposed as a source.
    #[error("level {level}: {inner}")]
    Level { level: usize, inner: Box<Error> },

    #[error("malformed CAVR data: {0}")]
    Cavr(String),

    #[error("missing weight tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}`: expected extents {expected:?}, found {found:?}")]
    ExtentMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("cost accounting mismatch in {label}: {detail}")]
    CostMismatch { label: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_level(self, level: usize) -> Self {
        match self {
            already @ Error::Level { .. } => already,
            other => Error::Level {
                level,
                inner: Box::new(other),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
