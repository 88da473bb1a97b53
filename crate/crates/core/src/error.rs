use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report. Variants are grouped so the CLI can
/// map them onto its exit codes (configuration 2, data 3, numeric 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("failed to load {entry}: {reason}")]
    Load { entry: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("alignment error for {entry}: audio covers {audio_frames:.2} frames but motion has {motion_frames}")]
    Alignment {
        entry: String,
        audio_frames: f64,
        motion_frames: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("speech encoder unavailable: {0} (use the `stub` encoder backend for weight-free runs)")]
    EncoderUnavailable(String),

    #[error("numeric divergence at {location}: {detail}")]
    NumericDivergence { location: String, detail: String },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn load(entry: impl Into<String>, reason: impl ToString) -> Self {
        Error::Load {
            entry: entry.into(),
            reason: reason.to_string(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::EncoderUnavailable(_) => 2,
            Error::NumericDivergence { .. } => 4,
            Error::Contract(_) | Error::Domain(_) | Error::Undefined(_) => 2,
            Error::Load { .. }
            | Error::Format { .. }
            | Error::Validation(_)
            | Error::Alignment { .. }
            | Error::EmptyInput(_)
            | Error::Checkpoint(_)
            | Error::Io(_) => 3,
        }
    }
}
