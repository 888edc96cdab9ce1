//! Terrain-conditioned vehicle dynamics toolkit.
//!
//! The crate combines a parametric single-track vehicle model with a learned
//! force compensator that is conditioned on visual terrain features. Around
//! that core it provides the supporting pipeline: reverse-mode autodiff for
//! training, PCA compression of visual features, a robot-centric voxel map,
//! a synthetic off-road world for end-to-end validation, distance-randomized
//! training, and a sampling-based receding-horizon planner.

pub mod error;
pub mod features;
pub mod hybrid;
pub mod io;
pub mod mapping;
pub mod mppi;
pub mod nn;
pub mod tape;
pub mod train;
pub mod vehicle;
pub mod world;

pub use error::TdError;
