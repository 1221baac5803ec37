use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RptError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    TokenOutOfRange { id: u64, position: usize, vocab_size: usize },
    #[error("cannot parse token {token:?} at position {position}")]
    TokenParse { token: String, position: usize },
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("unknown tokenizer {0:?} (expected \"bytes\" or \"ids\")")]
    UnknownTokenizer(String),
    #[error("invalid window plan: {0}")]
    WindowPlan(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown config key {0:?}")]
    UnknownConfigKey(String),
    #[error("bad value for config key {key:?}: {message}")]
    ConfigValue { key: String, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("scoring provider failed: {0}")]
    Provider(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("mode/source mismatch: {0}")]
    ModeMismatch(String),
    #[error("mismatched partitions: {0}")]
    PartitionMismatch(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RptError>;

impl RptError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RptError::Io { path: path.into(), source }
    }
}
