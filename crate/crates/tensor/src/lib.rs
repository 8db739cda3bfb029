//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! This crate is the numerical substrate for the volumetric detection
//! stack: row-major tensors in two precision modes (64-bit for
//! verification, 32-bit for training), a thread-local computation tape,
//! direct 3D convolution kernels, seeded RNG, Adam/AdamW optimizers and
//! a binary checkpoint container.
//!
//! Everything is single-threaded and deterministic: the same seed and the
//! same call sequence produce bit-identical values and gradients.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod rng;
mod tape;
mod tensor;

pub use tape::{backward, clear_tape, is_grad_enabled, no_grad, tape_len};
pub use tensor::{DType, Tensor, TensorError};
