//! The guide's code snippets, compiled and run as doc-tests.
//!
//! Each chapter of `book/` is attached as module documentation so
//! `cargo test --doc` executes every Rust block in the guide; the book
//! cannot drift from the library without breaking the build.

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/preprocessing.md")]
pub mod preprocessing {}

#[doc = include_str!("../../../book/src/phantoms.md")]
pub mod phantoms {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry_guide {}

#[doc = include_str!("../../../book/src/pretraining.md")]
pub mod pretraining {}

#[doc = include_str!("../../../book/src/detection.md")]
pub mod detection {}

#[doc = include_str!("../../../book/src/semi_supervised.md")]
pub mod semi_supervised {}

#[doc = include_str!("../../../book/src/classification.md")]
pub mod classification {}
