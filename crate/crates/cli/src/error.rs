use pmq_core::PmqError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Input {
        path: String,
        #[source]
        source: PmqError,
    },

    #[error(transparent)]
    Core(#[from] PmqError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 2 config, 3 numeric failure, 4 I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input { source, .. } | CliError::Core(source) => {
                if source.is_numeric() {
                    3
                } else if source.is_io() {
                    4
                } else {
                    2
                }
            }
            CliError::Csv(_) | CliError::Io(_) => 4,
        }
    }

    /// Short class name used in sweep error tags.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "numeric",
            _ => "io",
        }
    }
}
