//! voxdet-core: a desk-scale, fully testable 3D trauma-detection pipeline.
//!
//! The stack covers CT-style volume preprocessing, synthetic phantom
//! generation with exact ground truth, masked-image-modeling pretraining
//! of a 3D U-Net, a set-prediction decoder with 8-vertex relative
//! position encoding, Mean-Teacher semi-supervised detection training,
//! and a weighted-BCE multi-label classification probe.

pub mod augment;
pub mod book;
pub mod classify;
pub mod config;
pub mod detect;
pub mod geometry;
pub mod logs;
pub mod manifest;
pub mod mim;
pub mod networks;
pub mod phantom;
pub mod rpe;
pub mod rvol;
pub mod volume;
