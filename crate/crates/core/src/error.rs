use omninft_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("prompt id {id} out of range for vocabulary of {vocab}")]
    InvalidPrompt { id: usize, vocab: usize },
    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{0}: length mismatch")]
    LengthMismatch(&'static str),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("sync reward needs at least 2 token pairs, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite {what} at {context}")]
    NonFinite { what: &'static str, context: String },
    #[error("unknown training mode `{name}` (available: {available})")]
    UnknownMode { name: String, available: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("prompt corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
