//! Differentiable primitives.
//!
//! Elementwise ops live as methods on [`crate::Tensor`]; structural and
//! volumetric ops (concat, conv) are free functions here. Every op
//! computes forward values eagerly and records a backward closure on the
//! thread-local tape.

mod broadcast;
mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape;

pub use conv::{conv3d, conv_transpose3d, max_pool3d};
pub use shape::concat;
