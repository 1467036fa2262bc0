//! Weakly supervised 3D box auto-labeling for LiDAR scenes.
//!
//! Turns 2D image box labels plus per-class size priors into 3D box
//! pseudo-labels: frustum geometry, proxy object injection, a
//! depth-normalized 2D loss, iterative pseudo-labeling and KITTI-style
//! evaluation.

pub mod annotator;
pub mod app;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod kitti_io;
pub mod losses;
pub mod pipeline;
pub mod proxy;
pub mod seed;
pub mod synth;
pub mod weak_geometry;
