use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed replay log {path}: {reason}")]
    ReplayFormat { path: PathBuf, reason: String },

    #[error("curation failed, missing: {}", missing.join(", "))]
    CurationMissing { missing: Vec<String> },

    #[error("curation failed: {game} run {run} checkpoint {checkpoint} has {available} transitions, {requested} requested")]
    CurationShort {
        game: String,
        run: u16,
        checkpoint: u16,
        requested: u64,
        available: u64,
    },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown game `{0}`")]
    UnknownGame(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing momentum mirror for objective {0}")]
    MissingMirror(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("normalization undefined for {game}: random and reference scores are both {score}")]
    ZeroDenominator { game: String, score: f64 },

    #[error("score table: {0}")]
    ScoreTable(String),

    #[error("environment fault at step {step}: {message}")]
    Environment { step: u64, message: String },

    #[error("training aborted at step {step}: non-finite loss; last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged { step: u64, last_good: Option<PathBuf> },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
