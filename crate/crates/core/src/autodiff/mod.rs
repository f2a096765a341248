//! Reverse-mode automatic differentiation over dense real tensors.

pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod tensor;

pub use gradcheck::{analytic_gradients, compare_gradients, finite_diff_check, CheckOptions, CheckReport, CoordCheck, ParamOwner};
pub use graph::{softmax, softmax_in_place, Axis, Gradients, Graph, Var};
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
