use std::path::{Path, PathBuf};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("refusing to overwrite {}", .0.display())]
    Exists(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fedtp_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingArtifact(_) => "missing_artifact",
            CliError::Exists(_) => "artifact_exists",
            CliError::Config(_) | CliError::Core(fedtp_core::Error::Config(_)) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "run",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json_line(&self) -> String {
        let path = match self {
            CliError::MissingArtifact(p) | CliError::Exists(p) | CliError::Io { path: p, .. } => {
                Some(p.display().to_string())
            }
            _ => None,
        };
        json!({ "error": self.kind(), "path": path, "message": self.to_string() }).to_string()
    }
}
