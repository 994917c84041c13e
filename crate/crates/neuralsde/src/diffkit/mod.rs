//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The design is define-by-run: a [`Graph`] tape is rebuilt for every loss
//! evaluation, recording topologically ordered nodes of forward values, and
//! [`Graph::backward`] runs one reverse sweep from a scalar root. Supported
//! operations cover what the simulation and likelihood graphs need: elementwise
//! arithmetic, scalar broadcasts, matrix multiply and affine layers, tanh/softplus/
//! exp/log/square/sqrt, positive part, sums and means, column stacking and
//! index gathers.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{inv_softplus, sigmoid, softplus, Graph, NodeId};
pub use tensor::Tensor;
