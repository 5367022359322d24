//! CLI error taxonomy mapped onto process exit codes.

use thiserror::Error;

/// Exit code 2: the invocation or configuration is wrong.
/// Exit code 3: the inputs could not be read or processed.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl From<sparsealign::Error> for CliError {
    fn from(e: sparsealign::Error) -> Self {
        use sparsealign::Error as E;
        match e {
            E::InvalidConfig(_) | E::InvalidGeometry(_) | E::EmptySchedule(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
