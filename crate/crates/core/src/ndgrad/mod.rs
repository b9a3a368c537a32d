//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The primitive set covers what the toy encoder needs: matrix products,
//! a handful of elementwise maps, softmax, layer normalization, row
//! gathering, head reshapes and cross-entropy. Broadcasting is limited to
//! scalar-with-array and equal shapes, plus [`Tape::add_row`] for biases.

mod array;
mod kernels;
mod optim;
mod tape;

pub use array::DiffArray;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{Tape, Var};
