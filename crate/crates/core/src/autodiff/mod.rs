//! Minimal reverse-mode automatic differentiation, sized for an LSTM
//! attention decoder: a fixed primitive set, an append-only tape, and a
//! finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use tape::{eval_primitive, Gradients, Primitive, Tape};
pub use tensor::{NodeRef, Tensor};
