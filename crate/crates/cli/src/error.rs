use std::fmt;
use std::io;

use mh3d_core::image::ImageError;
use mh3d_core::objectives::LossError;
use mh3d_core::radiance_field::RenderError;
use mh3d_core::synthdata::SynthError;
use mh3d_core::trainer::TrainError;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs that do not fit together (exit 2).
    Usage(String),
    /// Unreadable, unwritable or corrupt files (exit 3).
    Io(String),
    /// Training produced a non-finite value (exit 4).
    Numeric(String),
    /// Anything else (exit 1).
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric abort: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Size(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(_) | SynthError::Hash { .. } | SynthError::Image(_) | SynthError::Json(_) => {
                CliError::Io(e.to_string())
            }
            SynthError::Render(_) => CliError::Internal(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NumericAbort(_) => CliError::Numeric(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Io(_) | TrainError::Csv(_) | TrainError::Checkpoint(_) => CliError::Io(e.to_string()),
            TrainError::Config(_) | TrainError::Json(_) | TrainError::Loss(_) => CliError::Usage(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}
