//! Dense tensors and a reverse-mode automatic differentiation graph that
//! supports differentiating gradient expressions again (score functions,
//! Hessian-vector products, unrolled inner updates).

mod graph;
mod tensor;

pub use graph::{grad, grad2, grad_values, hvp, hvp_var, live_nodes, no_grad, Var, HESSIAN_DIM_LIMIT};
pub use tensor::{broadcast_shape, Tensor};

pub(crate) use graph::{logsumexp, sigmoid, softplus};
