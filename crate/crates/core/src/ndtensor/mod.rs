//! Tensors, the differentiation tape, and the outer-loop optimizer.

pub mod adam;
pub mod fd;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine_similarity, frobenius_norm, outer, Tensor};
