use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("subjects present in both pretrain and evaluation splits: {}", .0.join(", "))]
    Leakage(Vec<String>),

    #[error("unsupported reference scheme `{0}` (expected AR or LE)")]
    UnsupportedReference(String),

    #[error("montage requires electrode `{0}` which the recording does not contain")]
    MissingChannel(String),

    #[error("signal too short: {available} samples available, {needed} needed")]
    TooShort { needed: usize, available: usize },

    #[error("unsupported crop length {0} s (expected 5, 10, 20, 30 or 60)")]
    InvalidCropLength(f64),

    #[error("{what}: expected {expected}, got {actual}")]
    ShapeMismatch { what: String, expected: usize, actual: usize },

    #[error("report has no text in the requested clusters")]
    NoEligibleText,

    #[error("zero-norm {side} embedding at row {row}")]
    ZeroNorm { side: &'static str, row: usize },

    #[error("expected a square similarity matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("empty positive set for anchor {0}")]
    EmptyPositives(usize),

    #[error("{what} needs a batch of at least {needed}, got {got}")]
    BatchTooSmall { what: &'static str, needed: usize, got: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss {loss}); last batch: {batch}")]
    Diverged { step: usize, loss: f64, batch: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
