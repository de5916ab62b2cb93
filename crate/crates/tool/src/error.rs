use std::fmt::Display;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] sr_distill_core::Error),
    #[error("bad arguments: {0}")]
    Args(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    /// A check ran and failed.
    #[error("validation failed: {0}")]
    Validation(String),
}

impl ToolError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Display) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// 2 for caller mistakes, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Args(_) | Self::MissingPrerequisite(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = ToolError> = std::result::Result<T, E>;
