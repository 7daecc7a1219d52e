//! Loop-closure backend for monocular visual SLAM.
//!
//! Keyframes carry corner features with binary descriptors. Revisited places
//! are proposed by a bag-of-words database, verified by RANSAC PnP and a
//! hybrid 3D/2D Sim(3) estimator, and fused into a Sim(3) pose graph whose
//! optimization removes accumulated translation, rotation and scale drift.

pub mod bow;
pub mod camera;
pub mod config;
pub mod eval;
pub mod features;
pub mod image;
pub mod keyframe;
pub mod liegroup;
pub mod loopclosure;
pub mod pipeline;
pub mod pixelselect;
pub mod posegraph;
pub mod sim;

pub use camera::{CameraIntrinsics, InverseDepthPoint};
pub use image::GrayImage;
pub use liegroup::{SE3Pose, Sim3Pose, Sim3Tangent};
