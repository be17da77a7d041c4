//! Reverse-mode differentiation over dense `f64` matrices.

mod adam;
mod check;
mod tape;

pub use adam::{cosine_lr, Adam, AdamConfig};
pub use check::gradient_check;
pub use tape::{GradError, Gradients, Result, Shape, Tape, Tensor, Var};
