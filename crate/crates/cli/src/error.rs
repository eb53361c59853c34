use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: ssr_core::Error,
    },

    #[error(transparent)]
    Core(#[from] ssr_core::Error),
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>, source: impl Into<ssr_core::Error>) -> Self {
        Self::File {
            path: path.into(),
            source: source.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        use ssr_core::Error as E;
        match self {
            Self::Usage(_) => ExitCode::from(1),
            Self::Verification(_) => ExitCode::from(2),
            Self::File { source, .. } => match source {
                E::Config(_) | E::InvalidArgument(_) => ExitCode::from(1),
                _ => ExitCode::from(3),
            },
            Self::Core(e) => match e {
                E::Io(_)
                | E::Json(_)
                | E::CorruptHeader(_)
                | E::VersionMismatch { .. }
                | E::ShapeMismatch(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            },
        }
    }
}
