use std::io;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed rig spec: {0}")]
    RigSpec(String),
    #[error("joint `{joint}`: {reason}")]
    Joint { joint: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("uv ({u}, {v}) outside the unit square")]
    UvOutOfRange { u: f64, v: f64 },
    #[error("requested {k} neighbours from a set of {n} points")]
    TooManyNeighbours { k: usize, n: usize },
    #[error("empty point set")]
    EmptyPoints,
    #[error("unknown subject id {0}")]
    UnknownSubject(usize),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version { kind: &'static str, found: u32, expected: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
