use funcspace::embsearch::SearchError;
use funcspace::funcae::{AeError, TrainError};
use funcspace::genlab::GenError;
use funcspace::persist::PersistError;
use funcspace::diffcore::DiffError;
use funcspace::Scalar;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Ae(e) => e.into(),
            PersistError::Net(e) => CliError::Usage(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<AeError> for CliError {
    fn from(e: AeError) -> Self {
        match e {
            AeError::Diff(DiffError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl<S: Scalar> From<TrainError<S>> for CliError {
    fn from(e: TrainError<S>) -> Self {
        match e {
            TrainError::Ae(e) => e.into(),
            TrainError::NonFinite { .. } => CliError::Numeric(format!("{e}; the last saved checkpoint is kept")),
            TrainError::Checkpoint(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::NonFinite { .. } | SearchError::Diff(_) => CliError::Numeric(e.to_string()),
            SearchError::Ae(e) => e.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Sink { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
