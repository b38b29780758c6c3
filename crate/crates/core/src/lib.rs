//! Grid-map localization toolkit: tiled occupancy, reflectivity, semantic
//! and color maps built by two-step pose-graph SLAM, particle-filter
//! localization against them, and accuracy evaluation on synthetic logs.

pub mod config;
pub mod error;
pub mod evalgt;
pub mod gridmap;
pub mod mapping;
pub mod mcl;
pub mod pipeline;
pub mod pose;
pub mod posegraph;
pub mod preprocess;
pub mod sim;
pub mod slam;
pub mod sparse;

pub use error::{Error, Result};
pub use pose::{Pose2D, VehicleParams};
