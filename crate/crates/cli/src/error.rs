use sliceout::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("config error in {path}: {message}")]
    Config { path: String, message: String },

    /// A check ran and did not pass.
    #[error("{0}")]
    Failed(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    /// 1 for failed checks, 2 for usage and configuration, 3 for IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Io(_) => 3,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                CoreError::Io(_) | CoreError::Format(_) | CoreError::Consistency(_) => 3,
                CoreError::Usage(_) | CoreError::Config(_) | CoreError::Rate(_) | CoreError::Width { .. } => 2,
                _ => 1,
            },
        }
    }
}
