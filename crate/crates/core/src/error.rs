use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// A file could not be parsed. `line` is 1-based and counts the header.
    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    /// Loaded data violates a structural invariant.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Two inputs that must cover the same blocks do not.
    #[error("comparability error: {0}")]
    Comparability(String),

    /// A statistic has no defined value for the given input (empty set, zero total, ...).
    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    /// The requested enumeration is too large.
    #[error("resource error: {0}")]
    Resource(String),

    #[error("degenerate geography: block {0} has no smoothed mass for any race")]
    DegenerateGeography(u32),

    /// A precondition of an operation does not hold for the given record.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("plan generation failed after {attempts} attempts (best deviation {best_deviation:.6})")]
    PlanGeneration {
        attempts: usize,
        best_deviation: f64,
    },

    #[error("missing report input: {0}")]
    MissingCondition(String),

    /// A pipeline stage failed; `source` is the stage's own error.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by the user's configuration rather than a failing stage.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }

    pub fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }
}
