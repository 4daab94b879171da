//! Tensor type, reverse-mode autodiff tape, Adam, and finite-difference checks.

mod adam;
mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamSlot, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
