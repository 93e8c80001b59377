use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("dataset at {0} contains no instances")]
    EmptyDataset(PathBuf),
    #[error("record {record}: label {label} outside [0, {class_count})")]
    LabelOutOfRange { record: String, label: usize, class_count: usize },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("invalid split request: {0}")]
    Split(String),
    #[error("invalid model spec at layer {layer}: {reason}")]
    Spec { layer: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported explanation: {0}")]
    UnsupportedExplanation(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` requires `{missing}` to be run first")]
    MissingPrerequisite { stage: String, missing: String },
    #[error("provenance violation: {0}")]
    Provenance(String),
    #[error(transparent)]
    Nn(#[from] xaimi_nn::NnError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable tag for CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Load { .. } => "load",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Decode(_) => "decode",
            Error::Split(_) => "split",
            Error::Spec { .. } => "spec",
            Error::Shape(_) => "shape",
            Error::UnsupportedExplanation(_) => "unsupported_explanation",
            Error::Diverged(_) => "diverged",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::MissingPrerequisite { .. } => "missing_prerequisite",
            Error::Provenance(_) => "provenance",
            Error::Nn(_) => "engine",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
