//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they run; [`Tape::backward`] replays them
//! in reverse to produce vector-Jacobian products for every node. Sampled
//! noise enters as constants, so gradients flow only through the
//! reparameterized transformations built on top of it.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{sigmoid, softplus, Tensor};
