use std::path::Path;

use naicl_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    File { path: String, source: CoreError },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
    #[error("invariant failure: {0}")]
    Invariant(String),
}

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Io(_) | CoreError::Format { .. } => 3,
        CoreError::Config(_) | CoreError::InvalidArgument(_) => 2,
    }
}

impl CliError {
    /// 2 configuration/usage, 3 I/O or file format, 4 invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) | CliError::File { source: e, .. } => core_code(e),
            CliError::Json { source, .. } if source.is_io() => 3,
            CliError::Json { .. } | CliError::Usage(_) => 2,
            CliError::Invariant(_) => 4,
        }
    }
}

/// Attaches the offending path to a file-level failure.
pub fn at_path<T>(path: &Path, r: Result<T, CoreError>) -> CliResult<T> {
    r.map_err(|source| CliError::File { path: path.display().to_string(), source })
}

pub type CliResult<T> = Result<T, CliError>;
