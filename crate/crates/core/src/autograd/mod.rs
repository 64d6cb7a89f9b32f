//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation eagerly. Leaves created with
//! [`Graph::param`] receive gradients; leaves created with
//! [`Graph::constant`] do not. Because nodes are pushed in evaluation
//! order, `backward` simply walks the node list in reverse.
//!
//! Index arguments (gather positions, cross-entropy targets) are part of
//! the recorded op and are treated as constants by both `backward` and
//! [`Graph::replay`]. This is what makes top-k losses differentiable: the
//! index sets are chosen from values outside the graph and the selected
//! values flow through `gather`.

mod check;
mod graph;
mod tensor;

pub use check::finite_difference_check;
pub use graph::{Graph, Var};
pub use tensor::{Tensor, MAX_RANK};
