//! Simulator for markerless micromanipulation: weak-perspective tip
//! geometry, Chamfer-based hand-eye calibration, soft-gated tip tracking,
//! skeleton pseudo-labels and the macro-micro shared controller.

pub mod calibration;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod labeling;
pub mod scenario;

pub use error::{Error, Result};
pub use geometry::{CameraModel, EulerZYX, Mat3, Pose3, ToolOffset, Vec2, Vec3};
