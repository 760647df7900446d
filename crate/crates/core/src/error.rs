use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or parameters (bad thresholds, non-divisible grid, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A document could not be parsed.
    #[error("malformed document {context}: {message}")]
    Parse { context: String, message: String },

    /// A stage was invoked before the stage that produces its inputs.
    #[error("missing prerequisite: run stage `{stage}` first ({detail})")]
    MissingPrerequisite { stage: String, detail: String },

    /// Model training failed (single class, divergence).
    #[error("training error: {0}")]
    Training(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn missing(stage: &str, detail: impl Into<String>) -> Self {
        Error::MissingPrerequisite {
            stage: stage.to_string(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 configuration, 3 missing prerequisite, 4 data validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::Validation(_) | Error::Parse { .. } | Error::Image { .. } | Error::Io { .. } => 4,
            Error::Training(_) => 1,
        }
    }
}
