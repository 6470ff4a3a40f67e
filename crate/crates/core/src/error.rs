use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x_min}, {y_min}, {x_max}, {y_max}]: {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("logit width mismatch: expected {expected} ({detail}), got {actual}")]
    LogitWidth {
        expected: usize,
        actual: usize,
        detail: String,
    },

    #[error("objectness {0} outside [0, 1]")]
    InvalidObjectness(f64),

    #[error("ground-truth list is empty")]
    EmptyTruths,

    #[error("foreground RoI set is empty; cannot derive objectness threshold")]
    EmptyForegroundSet,

    #[error("average objectness requested over an empty proposal set")]
    EmptySet,

    #[error("direct prediction requires a classifier head with an unknown-class slot")]
    MissingUnknownSlot,

    #[error("precision undefined: {0} has a zero denominator")]
    UndefinedPrecision(&'static str),

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training diverged at step {step}, iteration {iteration}: loss = {loss}")]
    Diverged {
        step: u8,
        iteration: usize,
        loss: f64,
    },

    #[error("reports come from different scenarios ({left} vs {right})")]
    ManifestMismatch { left: String, right: String },

    #[error("unsupported format version {found:?} in {path} (expected major {expected})")]
    FormatVersion {
        path: PathBuf,
        found: String,
        expected: u32,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 for validation problems, 2 for runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. }
            | Error::Io { .. }
            | Error::EmptyForegroundSet
            | Error::EmptySet
            | Error::UndefinedPrecision(_) => 2,
            _ => 1,
        }
    }
}
