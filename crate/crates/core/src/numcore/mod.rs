//! Dense numeric kernel: a recording tape with reverse-mode gradients, a
//! parameter store with Adam, a checkpoint container and a finite-difference
//! gradient checker.
//!
//! Tensors are row-major `f64` matrices (`ndarray::Array2`). Every op is
//! recorded on a [`Tape`] as it executes; [`Tape::backward`] walks the record
//! in reverse and accumulates exact gradients.

mod checkpoint;
mod gradcheck;
mod store;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use store::{AdamConfig, ParamId, ParamStore};
pub use tape::{cosine_sim, CustomOp, Grads, Tape, Var};

/// Row-major 2-d tensor.
pub type Tensor2 = ndarray::Array2<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
