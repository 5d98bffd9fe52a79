//! Error types shared across tensor, layer, and model code.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape {lhs:?} does not match {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: shape {rhs:?} is not broadcastable to {lhs:?}")]
    NotBroadcastable {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: reduction over empty extent (axis {axis})")]
    EmptyReduce { op: &'static str, axis: usize },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward on a tensor that is detached from any tape")]
    DetachedBackward,

    #[error("backward requires a scalar, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
