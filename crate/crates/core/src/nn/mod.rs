//! Dense math kernel: tensors, a small reverse-mode graph, parameter storage
//! and the adaptive-moment optimizer.

mod graph;
mod params;
mod tensor;

pub use graph::{softmax_row, Bindings, Gradients, Graph, NoBindings, NodeId, Op, OpKind};
pub use params::{clip_grad_norm, init_orthogonal, AdamConfig, Moments, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("shape mismatch at node {node} ({kind}): {msg}")]
    Shape { node: NodeId, kind: OpKind, msg: String },
    #[error("input `{name}` of node {node} is not bound")]
    UnboundInput { node: NodeId, name: String },
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("graph is empty")]
    EmptyGraph,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("gradient/parameter mismatch: {0}")]
    NameMismatch(String),
}
