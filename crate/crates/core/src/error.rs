use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Non-finite values where finite ones are required.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Shape, resolution or arity violation of an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} out of range for {space} label space of size {size}")]
    LabelDomain {
        label: usize,
        size: usize,
        space: &'static str,
    },

    #[error("data error: {0}")]
    Data(String),

    /// Every problem found while validating a dataset manifest.
    #[error("dataset validation failed with {} problem(s):\n{}", .0.len(), .0.join("\n"))]
    Validation(Vec<String>),

    /// Every problem found while validating a run configuration.
    #[error("invalid configuration ({} problem(s)):\n{}", .0.len(), .0.join("\n"))]
    Config(Vec<String>),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("non-finite loss at phase {phase} step {step}: {detail}")]
    NonFiniteLoss {
        phase: u8,
        step: u64,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
