use std::io;
use std::path::PathBuf;

/// Process exit status. Stable for scripting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitCode {
    Ok = 0,
    /// Bad config, bad input data, I/O trouble, refused work.
    Config = 1,
    Infeasible = 2,
    /// The iteration did not converge or left the positive cone.
    NoConvergence = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {message}", .path.display())]
    Table { path: PathBuf, message: String },

    #[error("output directory {} is locked by another run ({})", .dir.display(), .lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },

    #[error(transparent)]
    Solver(#[from] killbridge::Error),

    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        use killbridge::Error as E;
        match self {
            CliError::Solver(E::Infeasible { .. }) => ExitCode::Infeasible,
            CliError::Solver(E::NoConvergence { .. } | E::Numerical(_)) => ExitCode::NoConvergence,
            _ => ExitCode::Config,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
