//! Minimal reverse-mode differentiation over dense tensors, plus the pooling
//! blocks and optimizer used by the compression pipeline.

mod adam;
pub mod pool;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Precision, SparseMatrix, Tape, Var};
pub use tensor::Tensor;
