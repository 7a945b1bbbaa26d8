use thiserror::Error;

/// Failure of a command, split by exit status.
#[derive(Error, Debug)]
pub enum CliError {
    /// Malformed or inconsistent input. Exit status 2.
    #[error("{0}")]
    Input(String),
    /// The fit or a solver broke down. Exit status 3.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<compadre::Error> for CliError {
    fn from(e: compadre::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
