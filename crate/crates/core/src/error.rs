use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at byte {offset}: {msg}")]
    Parse {
        file: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("join failed, unmatched keys: {}", .0.join(" "))]
    Join(Vec<String>),

    #[error("degenerate outcome: {0}")]
    Degenerate(String),

    #[error("numerical abort at epoch {epoch} (tau={tau}, lr={lr}): {detail}")]
    NumericalAbort {
        epoch: usize,
        tau: f64,
        lr: f64,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::Join(_) => 3,
            Error::NonFinite { .. } | Error::NumericalAbort { .. } => 4,
            Error::Tape(_) | Error::Degenerate(_) => 2,
        }
    }
}
