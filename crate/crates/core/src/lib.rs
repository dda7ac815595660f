//! Sparse event-based visual odometry toolkit.
//!
//! The pipeline simulates events from a synthetic scene, accumulates them into
//! voxel grids, scores trackable locations, samples sparse patches, tracks them
//! through a patch graph and refines poses and depths with a weighted
//! sliding-window bundle adjustment. Trajectory metrics evaluate the result.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod camera;
pub mod config;
pub mod error;
pub mod event;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod sampler;
pub mod scorer;
pub mod sim;
pub mod tracker;
pub mod trajectory;

pub use camera::CameraIntrinsics;
pub use error::{Error, Result};
pub use event::{Event, TimeWindow, VoxelGrid};
pub use pose::Pose;
pub use trajectory::Trajectory;
