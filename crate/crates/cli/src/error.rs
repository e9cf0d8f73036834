use std::fmt;
use std::path::Path;

use orthoaugm::Error;

/// Failure classes with fixed process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
    StudyFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::StudyFailed(_) => 5,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m)
            | CliError::Io(m)
            | CliError::Numerical(m)
            | CliError::StudyFailed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::RankDeficient { .. }
            | Error::InsufficientData { .. }
            | Error::NonFinite(_)
            | Error::NonFiniteObjective { .. }
            | Error::SingularGram { .. }
            | Error::DegenerateSignal => CliError::Numerical(msg),
            Error::Parse(_) => CliError::Io(msg),
            Error::DimensionMismatch { .. }
            | Error::MissingThetaAux
            | Error::OddLengthD1(_)
            | Error::InvalidSpec(_) => CliError::Usage(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
