//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every update. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order and each node is visited once.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{finite_diff_check, FiniteDiffReport};
pub use graph::{DistanceMode, Graph, Var, DISTANCE_EPS};
pub(crate) use graph::{distance_matrix, log_sum_exp_row};
pub use params::{Bound, ParamSet};
