//! Dense tensors, views and reverse-mode autodiff.

mod conv;
pub mod counters;
mod dense;
mod element;
mod gradcheck;
mod graph;
mod ops;
mod param;

pub use counters::Counters;
pub use dense::Tensor;
pub use element::Element;
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, Var};
pub use param::{AxisSel, ParamId, ParamStore, Parameter, Region};
