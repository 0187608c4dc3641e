use std::path::Path;

use thiserror::Error;

/// Failure classes of a command, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Solver(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<blindtof::Error> for CliError {
    fn from(e: blindtof::Error) -> Self {
        use blindtof::Error as E;
        match e {
            e if e.is_io() => CliError::Io(e.to_string()),
            E::AllPixelsFailed(_)
            | E::AllRestartsDegenerate(_)
            | E::DegenerateLinearization
            | E::DegenerateKernel
            | E::TooFewRoots(_)
            | E::IndistinguishableSpikes
            | E::ZeroMoments
            | E::ZeroPolynomial
            | E::StrangFixViolated(_)
            | E::InsufficientMoments { .. } => CliError::Solver(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }
    }
}

/// Tags a library error with the file it concerns.
pub trait WithPath<T> {
    fn at(self, path: &Path) -> Result<T, CliError>;
}

impl<T> WithPath<T> for blindtof::Result<T> {
    fn at(self, path: &Path) -> Result<T, CliError> {
        self.map_err(|e| match CliError::from(e) {
            CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
