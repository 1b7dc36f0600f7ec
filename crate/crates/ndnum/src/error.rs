use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: tensor of shape {shape:?} has {len} values")]
    BadLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("log of non-positive value {value} at flat index {index}")]
    NonPositiveLog { index: usize, value: f64 },
    #[error("{op}: empty tensor where a nonempty one is required")]
    Empty { op: &'static str },
    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: index {index} out of range for {len} elements")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("graph node {node} refers to input {input} that does not precede it")]
    Cycle { node: usize, input: usize },
    #[error("unknown graph node {0}")]
    UnknownNode(usize),
    #[error("fragment decode failed at byte offset {offset}: {reason}")]
    Fragment { offset: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
