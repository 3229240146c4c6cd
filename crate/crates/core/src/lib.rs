//! Optical-flow sensor emulation and a monocular visual-inertial odometry
//! pipeline built around it.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod camera;
pub mod dataset;
pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod host_tracker;
pub mod image;
pub mod imu_preint;
pub mod kv;
pub mod sensor_emu;
pub mod timing_model;
pub mod tracker;
