use std::io;
use std::path::PathBuf;

use gcrf_core::GcrfError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_SINGULAR: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] GcrfError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("gradient check breached tolerance {tolerance:e} on {paths}")]
    GradcheckBreach { tolerance: f64, paths: String },
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::File {
            path: path.into(),
            source,
        }
    }

    /// Stable category printed with every error, so scripts can branch on it.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                GcrfError::SingularSystem(_) => "singular_system",
                GcrfError::NoConvergence { .. } | GcrfError::NonFinite(_) => "numerical",
                GcrfError::Io(_) => "io",
                _ => "bad_input",
            },
            CliError::Config(_) => "bad_input",
            CliError::File { .. } => "io",
            CliError::GradcheckBreach { .. } => "gradcheck_breach",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "singular_system" | "numerical" => EXIT_SINGULAR,
            "io" => EXIT_IO,
            "gradcheck_breach" => EXIT_GRADCHECK,
            _ => EXIT_BAD_INPUT,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
