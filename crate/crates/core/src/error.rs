use thiserror::Error;

/// Errors produced by the tracking toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("ray does not intersect the ground plane")]
    NoIntersection,
    #[error("direction undefined: object coincides with the sensor")]
    UndefinedDirection,
    #[error("assignment problem has no feasible solution")]
    NoSolution,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
