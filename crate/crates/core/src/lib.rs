//! Offline ground-truth reconstruction for dual-RTK-GNSS vehicles.
//!
//! The crate turns two GNSS antenna tracks and a magnetometer into a 6-DoF
//! IMU trajectory, and bundles the supporting calibrations: inter-sensor
//! time offsets, magnetometer intrinsics and extrinsics, fiducial marker
//! fields, rigid segment alignment and motor-vibration models.

pub mod alignment;
pub mod attitude;
pub mod geometry;
pub mod magcal;
pub mod markers;
pub mod pipeline;
pub mod sensors;
pub mod synthetic;
pub mod timesync;
pub mod vibration;

pub use geometry::{Pose, RotationMatrix, TimeSeries, Timestamped, Vec3};
