use thiserror::Error;

/// Errors raised by the modelling, scoring and evaluation code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("sequence of length {len} exceeds the supported maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} is outside the vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("no supervised positions")]
    NoTargets,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("missing reference transcript for utterance `{0}`")]
    MissingReference(String),

    #[error("malformed input at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint file is truncated")]
    Truncated,

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("vocabulary hash mismatch: checkpoint has {expected}, supplied vocabulary is {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("model configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
