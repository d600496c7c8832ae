use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, WmError>;

#[derive(Debug, Error)]
pub enum WmError {
    #[error("population size must be at least 1")]
    EmptyPopulation,

    #[error("invalid split boundaries ({val_start}, {test_start}) for {t_days} days")]
    InvalidSplit {
        val_start: u32,
        test_start: u32,
        t_days: u32,
    },

    #[error("invalid history: {0}")]
    InvalidHistory(String),

    #[error("unknown feature name `{0}`")]
    UnknownFeature(String),

    #[error("invalid clamp specification: {0}")]
    InvalidClamp(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty data set")]
    EmptyData,

    #[error("model is frozen and cannot be updated")]
    FrozenModel,

    #[error("beliefs require a frozen world model")]
    NotFrozen,

    #[error("labels contain a single class")]
    SingleClass,

    #[error("treatment indicator contains a single arm")]
    SingleArm,

    #[error("zero variance input to {0}")]
    ZeroVariance(&'static str),

    #[error("correlation undefined: zero rank variance")]
    UndefinedCorrelation,

    #[error("{test} needs at least {need} observations, got {got}")]
    TooFewSamples {
        test: &'static str,
        need: usize,
        got: usize,
    },

    #[error("action component {0} out of range (expected 0..5)")]
    ActionIndex(usize),

    #[error("exact free energy needs at most {limit} enumerated hidden units, model has {got}")]
    ExactUnavailable { limit: usize, got: usize },

    #[error("schema mismatch: expected {expected}, got {got}")]
    SchemaMismatch { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path}; run stage `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("stale artifact from stage `{stage}`: {detail}; rerun `{stage}`")]
    StaleArtifact { stage: &'static str, detail: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
