//! RVT: a multi-view transformer policy for 3D manipulation.
//!
//! A scene point cloud is re-rendered into virtual orthographic views, the
//! views are processed by a staged transformer, and the per-view heatmaps are
//! back-projected onto a 3D grid to pick the gripper translation.

pub mod bench;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod geom;
pub mod model;
pub mod nnet;
pub mod render;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
