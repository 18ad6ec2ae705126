//! Tightly-coupled visual-DVL-inertial odometry at desk scale.
//!
//! The crate bundles an MSCKF-style estimator that fuses IMU, DVL velocity,
//! pressure depth and monocular feature tracks, a DVL-point-cloud feature
//! enhancement pipeline, a deterministic under-ice simulator producing all
//! four sensor streams, and trajectory evaluation (alignment + ATE).

pub mod config;
pub mod estimator;
pub mod eval;
pub mod features;
pub mod geom;
pub mod logio;
pub mod propagation;
pub mod sim;
pub mod state;
pub mod updates;
