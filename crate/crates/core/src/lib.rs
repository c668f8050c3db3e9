//! Sparse-view novel view synthesis with a plane-sweep geometry volume and
//! attention-based feature rectification.
//!
//! Pipeline: a 2-D CNN extracts features from three source views; homography
//! warping onto depth planes builds a variance cost volume that a 3-D U-Net
//! encodes into a geometry volume; a radiance field samples that volume along
//! target rays, rectifies per-sample features with two multi-head attention
//! modules (geometric, then appearance by default) queried by rendered-depth
//! and ray-direction embeddings, and volume-renders color and depth. Training
//! minimizes an L2 photometric loss end to end.

pub mod config;
pub mod costvolume;
pub mod field;
pub mod geometry;
pub mod gradcheck;
pub mod nn;
pub mod renderer;
pub mod tensor;
