use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error {}: {message}", describe_record(*.record))]
    Parse {
        /// Zero-based record index; `None` for the header line.
        record: Option<usize>,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("timestep {t} outside {lo}..={hi}")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("numerical error in {stage}: {message}")]
    Numerical { stage: &'static str, message: String },

    #[error("training diverged ({message}); last good checkpoint: {}", describe_ckpt(.last_good))]
    Diverged {
        message: String,
        last_good: Option<PathBuf>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(record: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            record,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (configuration, malformed or
    /// mismatched files) rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Format(_)
            | Error::Shape(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

fn describe_record(record: Option<usize>) -> String {
    match record {
        Some(i) => format!("at record {i}"),
        None => "in header".to_string(),
    }
}

fn describe_ckpt(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => p.display().to_string(),
        None => "none".to_string(),
    }
}
