//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation: enough for the streaming Transformer, the CTC and
//! distillation losses, and a finite-difference gradient checker.
//!
//! Tensors are immutable values; a [`Tape`] records primitive applications
//! in topological order and replays them backwards exactly once per call to
//! [`Tape::backward`]. Every primitive checks its output for NaN/Inf and
//! reports a [`TensorError::NonFinite`] instead of propagating silently.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{CustomScalarOp, Gradients, Tape, TensorId};
pub use tensor::{Real, Tensor, TensorError};
