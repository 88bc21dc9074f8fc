//! Multi-modal alignment of windowed geometry predictions.
//!
//! A video is cut into overlapping clips; for each clip a predictor supplies
//! clip-relative point maps, affine-ambiguous disparity maps and Plücker ray
//! maps. This crate fuses them into one globally consistent reconstruction
//! (per-frame disparity, focal length and pose), and ships the synthetic
//! oracle, metrics and file formats needed to verify the result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aligner;
pub mod geometry;
pub mod init;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod ray_solver;
pub mod windowing;
