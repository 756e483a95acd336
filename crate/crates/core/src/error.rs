use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: zero norm")]
    DegenerateVector,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("diverged forward pass: loss is {0}")]
    Diverged(f64),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("duplicate task `{0}`")]
    DuplicateTask(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("undefined {0}: labels contain a single class")]
    UndefinedMetric(&'static str),

    #[error("missing entry T[{stage}][{task}] in evaluation matrix")]
    MissingEntry { stage: usize, task: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
