use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input files.
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] rifle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{} of {total} seeds failed: {}", .failures.len(), render_failures(.failures))]
    Seeds { total: usize, failures: Vec<(u64, String)> },
}

fn render_failures(failures: &[(u64, String)]) -> String {
    failures
        .iter()
        .map(|(s, e)| format!("seed {s}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration and input errors, 1 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                rifle_core::Error::Config(_) | rifle_core::Error::Parse { .. } => 2,
                _ => 1,
            },
            CliError::Io { .. } | CliError::Seeds { .. } => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
