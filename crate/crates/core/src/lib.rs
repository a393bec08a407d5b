//! Structured contiguous-slice dropout ("SliceOut") on a small CPU training
//! stack, with standard and controlled dropout baselines.

pub mod costmodel;
pub mod error;
pub mod nn;
pub mod slicing;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Counters, Element, Graph, ParamId, ParamStore, Tensor, Var};
