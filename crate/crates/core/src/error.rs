use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid actuator state: {0}")]
    InvalidState(String),
    #[error("kinematic limit exceeded: {0}")]
    KinematicLimit(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("mesh is not a closed consistently oriented surface ({} offending edges): {reason}", edges.len())]
    MeshInvalid {
        reason: String,
        edges: Vec<(u32, u32)>,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("initial nominal state is infeasible: {0}")]
    Infeasible(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
