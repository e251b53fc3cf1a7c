//! Dense tensors, a reverse-mode tape, and the AdamW optimizer.

mod adamw;
pub mod check;
pub mod container;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
