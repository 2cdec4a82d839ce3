//! Dense double-precision tensors with a reverse-mode tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradients, Coordinates, GradCheckReport};
pub use graph::{EmptyRows, Gradients, Graph, Var, COSINE_ZERO_NORM};
pub use tensor::{Mask, Tensor};

#[cfg(test)]
mod tests;
