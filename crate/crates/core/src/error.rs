//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LormError>;

#[derive(Debug, Error)]
pub enum LormError {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: factorization failed (pivot {pivot:e} at index {index}, pivot ratio estimate {condition:e})")]
    Singular {
        op: &'static str,
        index: usize,
        pivot: f64,
        condition: f64,
    },

    #[error("{op}: entry ({row}, {col}) = {value:e} is too close to zero to divide by")]
    NearZeroEntry {
        op: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty partition for task {task}, client {client}")]
    EmptyPartition { task: usize, client: usize },

    #[error("client {client} failed: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<LormError>,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed json in {path}: {source}")]
    JsonFile {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl LormError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LormError::InvalidArgument(msg.into())
    }

    /// Short stable tag for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            LormError::DimensionMismatch { .. } => "dimension_mismatch",
            LormError::Singular { .. } => "singular",
            LormError::NearZeroEntry { .. } => "near_zero_entry",
            LormError::NonFinite(_) => "non_finite",
            LormError::InvalidArgument(_) => "invalid_argument",
            LormError::EmptyPartition { .. } => "empty_partition",
            LormError::Client { .. } => "client_failure",
            LormError::Protocol(_) => "protocol",
            LormError::Config(_) => "config",
            LormError::Io { .. } => "io",
            LormError::Json(_) | LormError::JsonFile { .. } => "json",
        }
    }
}
