//! Dense `f32` tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s. Differentiable computation is recorded on a
//! [`Tape`]: every op appends one node whose inputs all have smaller indices,
//! so reverse index order is a valid topological order for [`Tape::backward`].
//! Trainable weights are owned by a [`ParamStore`] and enter a tape through
//! [`Tape::param`]; after the backward pass their gradients are accumulated
//! back into the store and consumed by [`AdamW`].

mod checkpoint;
mod gemm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gemm::matmul_into;
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
