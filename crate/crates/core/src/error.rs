use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input shapes do not conform to what an operation expects.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    Numeric { op: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("loss is not attached to the tape")]
    NoTape,

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Feature shapes drift between layers of the modular network.
    #[error("modular layer {layer}: {detail}")]
    Layer { layer: usize, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown {kind} `{name}`")]
    Vocabulary { kind: &'static str, name: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("corrupt checkpoint: {reason} (expected entries: {expected:?})")]
    Corruption {
        reason: String,
        expected: Vec<String>,
    },

    #[error("checkpoint variant `{found}` does not match requested `{requested}`")]
    VariantMismatch { found: String, requested: String },

    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),

    #[error("cannot sample pairs for task `{task}`: {count} annotation(s), need at least 2")]
    Sampling { task: String, count: usize },

    #[error("few-shot split: {0}")]
    Split(String),

    #[error("training diverged at step {step} (pairs {pairs:?})")]
    Diverged { step: usize, pairs: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Dataset(e) => e.is_io(),
            _ => false,
        }
    }
}
