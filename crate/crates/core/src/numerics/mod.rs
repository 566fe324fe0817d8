//! Dense `f64` tensors, a dynamic reverse-mode tape, Adam and a
//! central-difference gradient checker.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, relative_error, GRAD_CHECK_FLOOR};
pub use tape::{Tape, Var};
pub use tensor::{DiffTensor, ParamId, ParamStore};

#[cfg(test)]
mod tests;
