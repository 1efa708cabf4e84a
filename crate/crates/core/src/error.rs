use std::path::PathBuf;

use imitate_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("image extent {height}x{width} must be a positive multiple of {multiple}")]
    ImageExtent {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("image values must lie in [0, 1]; found {0}")]
    ImageRange(f64),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    OutOfVocabulary { token: u32, vocab: usize },
    #[error("cannot encode an empty token sequence")]
    EmptyTokens,
    #[error("report has {0} tokens in total; at least 3 are required")]
    ShortReport(usize),
    #[error("missing latent role `{0}`")]
    MissingLatent(&'static str),
    #[error("batch size mismatch: {0} rows vs {1} rows")]
    BatchMismatch(usize, usize),
    #[error("{what} must be square, got {rows}x{cols}")]
    NotSquare {
        what: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("smoothing coefficient must be positive, got {0}")]
    InvalidLambda(f64),
    #[error("{count} tokens exceed the positional capacity of {capacity}")]
    TooManyTokens { count: usize, capacity: usize },
    #[error("retrieval K={k} exceeds the {candidates} available candidates")]
    RetrievalK { k: usize, candidates: usize },
    #[error("{0}")]
    Corpus(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFinite {
        term: String,
        step: usize,
        /// Parameters before the failing step.
        last_good: Box<crate::params::ParamStore>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
