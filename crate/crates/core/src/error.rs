use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the process exit code the CLI maps them to
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: u64, message: String },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("statistics error: min {min} > max {max}")]
    Statistics { min: f64, max: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error in {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("insufficient sampling: budget {budget} < regions + 2 ({required})")]
    InsufficientSampling { budget: usize, required: usize },

    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("bench error: {0}")]
    Bench(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("missing upstream artifact {}: {stage} must run first", path.display())]
    Dependency { stage: String, path: PathBuf },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 5 dependency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Config(_)
            | Error::Partition(_)
            | Error::InsufficientSampling { .. } => 2,
            Error::Parse { .. }
            | Error::DegenerateDataset(_)
            | Error::Format(_)
            | Error::Consistency(_)
            | Error::Io { .. } => 3,
            Error::Statistics { .. }
            | Error::Shape { .. }
            | Error::Contract(_)
            | Error::Numeric(_)
            | Error::UndefinedMetric { .. }
            | Error::Bench(_) => 4,
            Error::Dependency { .. } => 5,
        }
    }
}
