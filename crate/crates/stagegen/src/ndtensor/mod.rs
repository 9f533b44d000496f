//! Minimal differentiable-compute core.
//!
//! A fixed vocabulary of layers (convolutions, normalizations, activations,
//! losses) over a reverse-mode tape, plus the Adam optimizer and a
//! finite-difference gradient checker. Training runs at `f32`; the gradient
//! checker instantiates the same generic ops at `f64`.
//!
//! Ops are pure given their inputs and may run concurrently on disjoint
//! tensors; a single tensor must not be mutated while an op reads it.

mod adam;
mod gradcheck;
mod ops;
mod tensor;

pub use adam::{adam_step, Adam, AdamState};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use ops::{
    add, batch_norm2d, bce_with_logits, broadcast_add_channels, concat_channels, conv2d,
    conv_transpose2d, dropout, instance_norm2d, l1_loss, leaky_relu, mul_scalar, reflect_pad2d,
    relu, reshape, sigmoid, tanh, NormMode,
};
pub use tensor::{Real, Tensor};
