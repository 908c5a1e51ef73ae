//! Dense tensors, a recording tape for reverse-mode gradients, and Adam.

mod adam;
mod tape;
mod tensor;

pub use adam::Adam;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
