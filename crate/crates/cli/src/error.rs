use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const RUNTIME: i32 = 3;
    pub const IO: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid value for `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: deltafm::Error,
    },
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] deltafm::Error),
}

impl CliError {
    pub fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Field {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Prefix a core validation error with the config section it came from.
    pub fn nested(section: &str, err: deltafm::Error) -> Self {
        match err {
            deltafm::Error::InvalidArgument { name, reason } => CliError::field(format!("{section}.{name}"), reason),
            other => CliError::field(section, other.to_string()),
        }
    }

    /// Attach a file path to a core error, keeping IO failures distinct.
    pub fn at_path(path: &Path, err: deltafm::Error) -> Self {
        match err {
            deltafm::Error::Io(source) => CliError::Io {
                path: path.to_path_buf(),
                source,
            },
            source => CliError::Data {
                path: path.to_path_buf(),
                source,
            },
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use deltafm::Error as E;
        match self {
            CliError::Config(_) | CliError::Field { .. } | CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Core(E::Io(_)) | CliError::Data { source: E::Io(_), .. } => exit::IO,
            CliError::Core(E::InvalidArgument { .. } | E::MissingMeanTrajectory(_) | E::LabelOutOfRange { .. }) => {
                exit::USAGE
            }
            CliError::UnsupportedDimension(_) => exit::USAGE,
            CliError::Data { .. } | CliError::CheckFailed(_) | CliError::Core(_) => exit::RUNTIME,
        }
    }
}
