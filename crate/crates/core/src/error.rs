use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input not found: {}", .0.display())]
    InputNotFound(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing credential: environment variable {0} is not set")]
    Credential(&'static str),

    #[error("incomplete {what}: missing {}", format_ids(.missing))]
    Incomplete { what: String, missing: Vec<String> },

    #[error("missing upstream stage `{stage}`: {detail}")]
    MissingStage { stage: String, detail: String },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("remote request failed after {attempts} attempts (last status: {status}): {detail}")]
    Remote {
        attempts: u32,
        status: String,
        detail: String,
    },

    #[error("zero vector for {0}: similarity undefined")]
    ZeroVector(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Internal(String),
}

fn format_ids(ids: &[String]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(" ... ({} total)", ids.len()));
    }
    s
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::InputNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InputNotFound(_) | Error::Parse { .. } | Error::Config(_) => 2,
            Error::Credential(_) => 3,
            Error::Incomplete { .. } => 4,
            Error::MissingStage { .. } => 5,
            _ => 1,
        }
    }
}
