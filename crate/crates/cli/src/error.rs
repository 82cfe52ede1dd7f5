use std::path::PathBuf;

/// Everything a command can fail with, sorted by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flag values, unknown names, malformed or unknown config keys.
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("weight file: {0}")]
    Weights(String),
    #[error(transparent)]
    Core(#[from] fredft::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
