//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Backward rules are expressed with the same differentiable operations as
//! the forward pass. Running them with graph recording on
//! ([`backward_create_graph`], or [`grad`] with `create_graph = true`) yields
//! gradients that are functions of the graph, so an update
//! `theta - alpha * grad` can itself be differentiated with respect to
//! `theta`, `alpha`, and anything upstream of the gradient.

mod backward;
mod kernels;
mod op;
mod ops;
mod primitive;
mod tensor;

pub use backward::{backward, backward_create_graph, grad, grad_with_schedule, Gradients, Schedule};
pub use op::Op;
pub use primitive::{forward_primitive, Primitive};
pub use tensor::{is_grad_enabled, no_grad, with_grad_mode, GraphNode, Tensor};
