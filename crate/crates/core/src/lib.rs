//! LiDAR-inertial-kinematic odometry for biped robots.
//!
//! An iterated error-state Kalman filter on SO(3) x R^18 fuses IMU propagation
//! with point-to-plane LiDAR residuals and leg-odometry velocity and foothold
//! residuals. The crate also ships a synthetic biped simulator that produces
//! every sensor stream against a known room, and trajectory metrics.

pub mod contact;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod iekf;
pub mod jacobian_check;
pub mod kin_measurement;
pub mod kinematics;
pub mod lidar;
pub mod manifold;
pub mod numdiff;
pub mod pipeline;
pub mod propagation;
pub mod simulator;
pub mod state;

pub use error::{Error, Result};
