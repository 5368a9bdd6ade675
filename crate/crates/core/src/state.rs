//! Filter state, covariance, noise configuration and sensor records.

use nalgebra::{DVector, Rotation3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error-state dimension.
pub const ERR_DIM: usize = 21;
/// Process-noise dimension, ordered `[w_ω, w_a, w_bω, w_ba, w_c]`.
pub const NOISE_DIM: usize = 15;

pub const ROT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;
pub const PC: usize = 15;
pub const GRAV: usize = 18;

pub const STANDARD_GRAVITY: f64 = 9.81;

pub type ErrorVector = SVector<f64, ERR_DIM>;
pub type Covariance = SMatrix<f64, ERR_DIM, ERR_DIM>;

/// Nominal state on SO(3) x R^18. All vectors are in the global frame except
/// the biases, which live in the IMU frame.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub rotation: Rotation3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub contact: Vector3<f64>,
    pub gravity: Vector3<f64>,
    pub timestamp: f64,
}

impl Default for State {
    fn default() -> Self {
        Self {
            rotation: Rotation3::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            contact: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
            timestamp: 0.0,
        }
    }
}

impl State {
    pub fn boxplus(&self, delta: &ErrorVector) -> State {
        crate::manifold::boxplus(self, delta)
    }

    pub fn boxminus(&self, other: &State) -> ErrorVector {
        crate::manifold::boxminus(self, other)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|v| v.is_finite())
            && [
                self.position,
                self.velocity,
                self.gyro_bias,
                self.accel_bias,
                self.contact,
                self.gravity,
            ]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Arbitrary state for property tests and Jacobian checks.
    pub fn random<R: rand::Rng>(rng: &mut R) -> State {
        let mut v = || {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        };
        let rot = v() * 2.0;
        let position = v() * 5.0;
        let velocity = v();
        let gyro_bias = v() * 0.05;
        let accel_bias = v() * 0.2;
        let contact = v() * 5.0;
        let gravity = Vector3::new(0.0, 0.0, -STANDARD_GRAVITY) + v() * 0.3;
        State {
            rotation: crate::manifold::exp_so3(&rot),
            position,
            velocity,
            gyro_bias,
            accel_bias,
            contact,
            gravity,
            timestamp: 0.0,
        }
    }
}

/// Forces exact symmetry after an update.
pub fn symmetrize(p: &mut Covariance) {
    *p = (*p + p.transpose()) * 0.5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Leg {
    Left,
    Right,
}

impl Leg {
    pub const BOTH: [Leg; 2] = [Leg::Left, Leg::Right];

    pub fn index(self) -> usize {
        match self {
            Leg::Left => 0,
            Leg::Right => 1,
        }
    }

    pub fn other(self) -> Leg {
        match self {
            Leg::Left => Leg::Right,
            Leg::Right => Leg::Left,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Leg::Left => "left",
            Leg::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Specific force, m/s².
    pub accel: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub t: f64,
    pub leg: Leg,
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceSample {
    pub t: f64,
    /// Normal force per foot `[left, right]`, N.
    pub fz: [f64; 2],
}

/// Initial one-sigma uncertainty of each error-state block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialStd {
    pub rotation: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub contact: f64,
    pub gravity: f64,
}

impl Default for InitialStd {
    fn default() -> Self {
        Self {
            rotation: 1e-2,
            position: 1e-4,
            velocity: 1e-2,
            gyro_bias: 1e-3,
            accel_bias: 5e-2,
            contact: 1e-2,
            gravity: 5e-2,
        }
    }
}

/// Noise model of the filter.
///
/// Continuous-time densities enter the covariance propagation as
/// `Q = diag(σ²) / Δt`; combined with the `Δt` carried by `F_w` this yields the
/// usual `Δt σ²` growth per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Gyro white noise, rad/s/√Hz.
    pub gyro_noise: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub accel_noise: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub gyro_bias_walk: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub accel_bias_walk: f64,
    /// Contact slip noise in the contact frame, m/s/√Hz.
    pub contact_slip: [f64; 3],
    /// Encoder position noise, rad.
    pub encoder_position: f64,
    /// Encoder velocity noise, rad/s.
    pub encoder_velocity: f64,
    /// LiDAR point noise, m.
    pub lidar_point: f64,
    /// Slip inflation floor added to the velocity measurement covariance, m/s.
    pub slip_velocity: f64,
    /// Floor added to the contact position measurement covariance, m.
    pub contact_position: f64,
    /// Standard deviation of the foothold after a touchdown reset, m.
    pub contact_reset: f64,
    pub initial: InitialStd,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 1.75e-4,
            accel_noise: 5.9e-4,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            contact_slip: [2e-3; 3],
            encoder_position: 1e-4,
            encoder_velocity: 1e-2,
            lidar_point: 0.02,
            slip_velocity: 0.05,
            contact_position: 0.01,
            contact_reset: 0.02,
            initial: InitialStd::default(),
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let i = &self.initial;
        let values = [
            ("gyro_noise", self.gyro_noise),
            ("accel_noise", self.accel_noise),
            ("gyro_bias_walk", self.gyro_bias_walk),
            ("accel_bias_walk", self.accel_bias_walk),
            ("contact_slip[0]", self.contact_slip[0]),
            ("contact_slip[1]", self.contact_slip[1]),
            ("contact_slip[2]", self.contact_slip[2]),
            ("encoder_position", self.encoder_position),
            ("encoder_velocity", self.encoder_velocity),
            ("lidar_point", self.lidar_point),
            ("slip_velocity", self.slip_velocity),
            ("contact_position", self.contact_position),
            ("contact_reset", self.contact_reset),
            ("initial.rotation", i.rotation),
            ("initial.position", i.position),
            ("initial.velocity", i.velocity),
            ("initial.gyro_bias", i.gyro_bias),
            ("initial.accel_bias", i.accel_bias),
            ("initial.contact", i.contact),
            ("initial.gravity", i.gravity),
        ];
        for (name, v) in values {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("noise.{name} must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Continuous-time process noise densities squared, in `w` order.
    pub fn process_densities(&self) -> SVector<f64, NOISE_DIM> {
        let mut q = SVector::<f64, NOISE_DIM>::zeros();
        for i in 0..3 {
            q[i] = self.gyro_noise.powi(2);
            q[3 + i] = self.accel_noise.powi(2);
            q[6 + i] = self.gyro_bias_walk.powi(2);
            q[9 + i] = self.accel_bias_walk.powi(2);
            q[12 + i] = self.contact_slip[i].powi(2);
        }
        q
    }

    pub fn initial_covariance(&self) -> Covariance {
        let i = &self.initial;
        let mut d = ErrorVector::zeros();
        let blocks = [
            (ROT, i.rotation),
            (POS, i.position),
            (VEL, i.velocity),
            (BG, i.gyro_bias),
            (BA, i.accel_bias),
            (PC, i.contact),
            (GRAV, i.gravity),
        ];
        for (offset, sigma) in blocks {
            for k in 0..3 {
                d[offset + k] = sigma * sigma;
            }
        }
        Covariance::from_diagonal(&d)
    }
}

/// Minimum stationary window for [`initial_state`], seconds.
pub const MIN_INIT_WINDOW: f64 = 0.5;

/// Static alignment from a stationary IMU window.
///
/// Roll and pitch align the mean specific force with `+z`, yaw is zero, the gyro
/// bias is the window mean of the angular rate and gravity is `[0, 0, -9.81]`.
/// The returned state is stamped with the first sample time.
pub fn initial_state(window: &[ImuSample], config: &NoiseConfig) -> Result<(State, Covariance)> {
    let duration = match (window.first(), window.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    if duration + 1e-9 < MIN_INIT_WINDOW {
        return Err(Error::InsufficientInitWindow { duration, required: MIN_INIT_WINDOW });
    }
    let n = window.len() as f64;
    let mean_acc = window.iter().fold(Vector3::zeros(), |acc, s| acc + s.accel) / n;
    let mean_gyro = window.iter().fold(Vector3::zeros(), |acc, s| acc + s.gyro) / n;

    let roll = mean_acc.y.atan2(mean_acc.z);
    let pitch = (-mean_acc.x).atan2((mean_acc.y * mean_acc.y + mean_acc.z * mean_acc.z).sqrt());
    let rotation = Rotation3::from_euler_angles(roll, pitch, 0.0);

    let state = State {
        rotation,
        gyro_bias: mean_gyro,
        timestamp: window[0].t,
        ..State::default()
    };
    Ok((state, config.initial_covariance()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::exp_so3;
    use approx::assert_relative_eq;

    fn window(rot: Rotation3<f64>, seconds: f64) -> Vec<ImuSample> {
        let accel = rot.transpose() * Vector3::new(0.0, 0.0, STANDARD_GRAVITY);
        let n = (seconds * 200.0).round() as usize;
        (0..=n)
            .map(|i| ImuSample { t: i as f64 / 200.0, gyro: Vector3::zeros(), accel })
            .collect()
    }

    #[test]
    fn ideal_stationary_imu() {
        let (x, p) = initial_state(&window(Rotation3::identity(), 1.0), &NoiseConfig::default()).unwrap();
        assert_relative_eq!(*x.rotation.matrix(), nalgebra::Matrix3::identity(), epsilon = 1e-15);
        assert_eq!(x.gravity, Vector3::new(0.0, 0.0, -9.81));
        assert_eq!(x.gyro_bias, Vector3::zeros());
        assert_eq!(x.accel_bias, Vector3::zeros());
        assert_relative_eq!(p[(POS, POS)], 1e-8);
    }

    #[test]
    fn tilted_imu_is_aligned() {
        let tilt = exp_so3(&Vector3::new(10f64.to_radians(), 0.0, 0.0));
        let w = window(tilt, 1.0);
        let (x, _) = initial_state(&w, &NoiseConfig::default()).unwrap();
        let leveled = x.rotation * w[0].accel;
        assert_relative_eq!(leveled, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
        // Closed form: tilt about x only, so the alignment must undo exactly that tilt.
        assert_relative_eq!(*x.rotation.matrix(), *tilt.matrix(), epsilon = 1e-12);

        let both = exp_so3(&Vector3::new(0.1, -0.15, 0.0));
        let w = window(both, 0.6);
        let (x, _) = initial_state(&w, &NoiseConfig::default()).unwrap();
        assert_relative_eq!(x.rotation * w[0].accel, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
    }

    #[test]
    fn short_window_rejected() {
        let err = initial_state(&window(Rotation3::identity(), 0.1), &NoiseConfig::default()).unwrap_err();
        assert!(err.to_string().contains("insufficient initialization window"));
        assert!(initial_state(&[], &NoiseConfig::default()).is_err());
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        let bad = NoiseConfig { lidar_point: 0.0, ..NoiseConfig::default() };
        assert!(bad.validate().is_err());
    }
}
