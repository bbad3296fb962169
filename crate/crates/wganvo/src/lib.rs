//! End-to-end monocular visual odometry with an adversarially trained
//! pose regressor.
//!
//! The pipeline: KITTI-style sequences are cropped, rescaled and paired
//! ([`dataset`]), a critic network with a pose head regresses the relative
//! motion between consecutive frames ([`model`], [`losses`], [`training`]),
//! and the composed trajectories are scored with the KITTI subsequence
//! metric and Sim(3) alignment ([`evaluation`]). Stereo triangulation for
//! the reprojection loss lives in [`triangulation`].

pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;
pub mod triangulation;
