//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are built eagerly: every operation on a [`Var`] computes its value
//! immediately and, if any input requires a gradient, records a backward
//! closure. [`Var::backward`] then walks the recorded graph once.

mod array;
pub mod gradcheck;
mod nn;
mod ops;
mod var;

pub use array::{Array, ShapeError};
pub use nn::{blur_down2_forward, conv2d_forward};
pub use ops::{sigmoid, softplus, sum_to_shape};
pub use var::{BackwardFn, Gradients, Var};
