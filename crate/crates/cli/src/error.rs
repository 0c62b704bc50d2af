use std::path::PathBuf;

use megcast::Error;

/// Failure of a command, mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },
    #[error("{0}")]
    Version(String),
    #[error("{0} already holds artifacts; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{0}")]
    Core(#[from] Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput { .. } => 3,
            CliError::Version(_) => 4,
            CliError::Core(Error::Version { .. }) => 4,
            CliError::Core(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 3,
            CliError::Exists(_) => 5,
            CliError::Core(_) | CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "missing_input",
            4 => "version",
            5 => "exists",
            _ => "failure",
        }
    }

    /// `error code=<n> kind=<kind> message=<text>` on one line.
    pub fn line(&self) -> String {
        let msg: String = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error code={} kind={} message={msg}", self.exit_code(), self.kind())
    }
}
