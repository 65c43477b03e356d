//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Leaves
//! are either trainable parameters ([`Graph::param`]) or constants
//! ([`Graph::constant`]); a [`Var`] is the handle a caller holds on a
//! recorded value. [`Graph::backward`] walks the record in reverse and
//! returns the gradient of a scalar loss for every parameter.
//!
//! Besides the usual primitives the graph provides [`Graph::stop_gradient`]
//! and [`Graph::partial_detach`], which keep the forward value bit-exact while
//! blocking or scaling the gradient through one edge.

mod error;
pub mod finite_diff;
mod graph;
mod tensor;

pub use error::AutodiffError;
pub use graph::{Gradients, Graph, Var, LAYER_NORM_VAR_FLOOR};
pub use tensor::Tensor;
