//! Dense tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are either constants
//! or named parameters; [`Tape::backward`] returns a [`GradientMap`] with one
//! entry per named parameter.

pub mod check;
mod error;
mod gradient;
mod kernels;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradient::GradientMap;
pub use tape::{AttentionLayout, Elementwise, Tape, Var};
pub use tensor::{Precision, Tensor};
