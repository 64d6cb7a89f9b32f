use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

/// Command failures, grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    /// An input file does not exist.
    MissingFile(PathBuf),
    /// Bad flags, config values or file contents.
    Validation(String),
    /// Non-finite values, divergence or failed linear algebra.
    Numerical(String),
    /// Any other I/O failure.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::MissingFile(_) => "missing_file",
            CliError::Validation(_) => "validation",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Line {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("plain strings serialize")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::MissingFile(p) => write!(f, "no such file: {}", p.display()),
            CliError::Validation(m) | CliError::Numerical(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<t2m_core::Error> for CliError {
    fn from(e: t2m_core::Error) -> Self {
        use t2m_core::Error as E;
        let message = e.to_string();
        match e {
            E::NonFinite { .. } | E::Diverged { .. } | E::NoConvergence { .. } | E::NotPsd(_) => {
                CliError::Numerical(message)
            }
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile(PathBuf::from(message))
            }
            E::Io(_) => CliError::Io(message),
            _ => CliError::Validation(message),
        }
    }
}
