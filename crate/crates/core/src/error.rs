use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value outside the unit ball: norm {0}")]
    OutsideUnitBall(f64),

    #[error("quaternion is not unit: norm {0}")]
    NotUnit(f64),

    #[error("dual quaternion violates the unit constraint (real.dual = {0})")]
    NotOrthogonal(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("matrix is singular: {0}")]
    Singular(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("node {0} is not part of the graph")]
    UnknownNode(NodeId),

    #[error("nodes {0} and {1} are not adjacent")]
    NotAdjacent(NodeId, NodeId),

    #[error("graph is not connected")]
    Disconnected,

    #[error("missing message from node {from} to node {to}")]
    MissingMessage { from: NodeId, to: NodeId },

    #[error("duplicate message from node {from} to node {to}")]
    DuplicateMessage { from: NodeId, to: NodeId },

    #[error("filter diverged: {0}")]
    Diverged(String),

    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
