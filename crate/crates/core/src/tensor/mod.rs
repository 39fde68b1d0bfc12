//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Leaves are registered with
//! [`Graph::param`] (gradient reported) or [`Graph::constant`]; every operation
//! appends a node holding its output and a [`Function`] implementing the
//! backward rule. [`Graph::backward`] sweeps the nodes in decreasing id order
//! and then clears the graph.

mod dense;
mod graph;
pub mod ops;
mod scalar;
mod shape;

pub use dense::Tensor;
pub use graph::{Function, Gradients, Graph, Var};
pub use ops::{sigmoid, NUMERIC_FLOOR};
pub use scalar::Scalar;
pub use shape::{Shape, MAX_RANK};
