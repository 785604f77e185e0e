//! Desk-scale 3D shape completion with multi-resolution patch priors.
//!
//! The pipeline, end to end:
//! 1. [`datagen`] renders meshes from many viewpoints and fuses the depth maps
//!    into complete and partial TSDF volumes ([`grid`]).
//! 2. [`priors`] seeds per-category learnable shape priors by mean-shift
//!    clustering over the training TSDFs.
//! 3. [`net`] defines the single-resolution patch-prior models and the
//!    multi-resolution fusion model over the [`diff`] tensor engine.
//! 4. [`train`] runs the staged protocols: per-resolution prior learning,
//!    fusion training with everything pre-trained frozen, and input-encoder
//!    fine-tuning on corrupted scans.
//! 5. [`eval`] extracts iso-surfaces, samples them, and reports Chamfer
//!    distance and IoU with instance and category rollups.

pub mod bundle;
pub mod datagen;
pub mod diff;
pub mod eval;
pub mod grid;
pub mod mesh;
pub mod net;
pub mod priors;
pub mod train;
