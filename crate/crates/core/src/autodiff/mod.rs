//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod nn;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, relative_error, GradCheckReport};
pub use nn::{gated_mix, gru_cell, linear, mean_pool, GruVars};
pub use tape::{Mode, Tape, Var, BCE_CLIP, COSINE_NORM_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
