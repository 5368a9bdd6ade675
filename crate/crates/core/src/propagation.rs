//! IMU-driven forward propagation of state and covariance.
//!
//! The discrete model is first-order Euler on the manifold,
//! `x_{t+1} = x_t ⊞ (Δt · f(x_t, u_t, w_t))`, with
//! `f = [ω - b_ω - w_ω; v; R(a - b_a - w_a) + g; w_bω; w_ba; R·fko·w_c; 0]`.
//!
//! Noise densities are continuous-time; the discrete covariance is
//! `Q = diag(σ²)/Δt` so that `F_w Q F_wᵀ` grows like `Δt σ²`.

use log::warn;
use nalgebra::{Matrix3, SMatrix, SVector};

use crate::manifold::{exp_so3, right_jacobian, skew};
use crate::state::{
    Covariance, ErrorVector, ImuSample, JointSample, NoiseConfig, State, BA, BG, GRAV, NOISE_DIM, PC, POS, ROT,
    VEL,
};

pub type NoiseVector = SVector<f64, NOISE_DIM>;
pub type NoiseJacobian = SMatrix<f64, 21, NOISE_DIM>;

/// Largest single propagation step; longer gaps are capped and reported.
pub const MAX_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessJacobians {
    pub fx: Covariance,
    pub fw: NoiseJacobian,
}

/// `f(x, u, 0)`.
pub fn process_model(x: &State, u: &ImuSample) -> ErrorVector {
    let mut f = ErrorVector::zeros();
    f.fixed_rows_mut::<3>(ROT).copy_from(&(u.gyro - x.gyro_bias));
    f.fixed_rows_mut::<3>(POS).copy_from(&x.velocity);
    f.fixed_rows_mut::<3>(VEL)
        .copy_from(&(x.rotation * (u.accel - x.accel_bias) + x.gravity));
    f
}

/// `f(x, u, w)` including the noise terms; `contact_frame` is `fko(q)` of the
/// stance leg.
pub fn process_model_noisy(x: &State, u: &ImuSample, contact_frame: &Matrix3<f64>, w: &NoiseVector) -> ErrorVector {
    let wg = w.fixed_rows::<3>(0);
    let wa = w.fixed_rows::<3>(3);
    let mut f = ErrorVector::zeros();
    f.fixed_rows_mut::<3>(ROT).copy_from(&(u.gyro - x.gyro_bias - wg));
    f.fixed_rows_mut::<3>(POS).copy_from(&x.velocity);
    f.fixed_rows_mut::<3>(VEL)
        .copy_from(&(x.rotation * (u.accel - x.accel_bias - wa) + x.gravity));
    f.fixed_rows_mut::<3>(BG).copy_from(&w.fixed_rows::<3>(6));
    f.fixed_rows_mut::<3>(BA).copy_from(&w.fixed_rows::<3>(9));
    f.fixed_rows_mut::<3>(PC)
        .copy_from(&(x.rotation.matrix() * contact_frame * w.fixed_rows::<3>(12)));
    f
}

/// One discrete transition `x ⊞ (Δt f(x, u, w))`, advancing the timestamp.
pub fn transition(x: &State, u: &ImuSample, contact_frame: &Matrix3<f64>, dt: f64, w: Option<&NoiseVector>) -> State {
    let f = match w {
        Some(w) => process_model_noisy(x, u, contact_frame, w),
        None => process_model(x, u),
    };
    let mut next = x.boxplus(&(f * dt));
    next.timestamp = x.timestamp + dt;
    next
}

/// Analytic `F_x` and `F_w` of [`transition`] in error-state coordinates.
pub fn process_jacobians(x: &State, u: &ImuSample, contact_frame: &Matrix3<f64>, dt: f64) -> ProcessJacobians {
    let omega = u.gyro - x.gyro_bias;
    let acc = u.accel - x.accel_bias;
    let r = x.rotation.matrix();
    let jr = right_jacobian(&(omega * dt));
    let i3 = Matrix3::<f64>::identity();

    let mut fx = Covariance::identity();
    fx.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(exp_so3(&(-omega * dt)).matrix());
    fx.fixed_view_mut::<3, 3>(ROT, BG).copy_from(&(-jr * dt));
    fx.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(i3 * dt));
    fx.fixed_view_mut::<3, 3>(VEL, ROT).copy_from(&(-r * skew(&acc) * dt));
    fx.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-r * dt));
    fx.fixed_view_mut::<3, 3>(VEL, GRAV).copy_from(&(i3 * dt));

    let mut fw = NoiseJacobian::zeros();
    fw.fixed_view_mut::<3, 3>(ROT, 0).copy_from(&(-jr * dt));
    fw.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&(-r * dt));
    fw.fixed_view_mut::<3, 3>(BG, 6).copy_from(&(i3 * dt));
    fw.fixed_view_mut::<3, 3>(BA, 9).copy_from(&(i3 * dt));
    fw.fixed_view_mut::<3, 3>(PC, 12).copy_from(&(r * contact_frame * dt));
    ProcessJacobians { fx, fw }
}

/// One propagation step of state and covariance.
pub fn propagate(
    x: &State,
    p: &Covariance,
    u: &ImuSample,
    contact_frame: &Matrix3<f64>,
    dt: f64,
    cfg: &NoiseConfig,
) -> (State, Covariance, ProcessJacobians) {
    let next = transition(x, u, contact_frame, dt, None);
    let jac = process_jacobians(x, u, contact_frame, dt);
    let q = cfg.process_densities() / dt;
    let fw_q = jac.fw * SMatrix::<f64, NOISE_DIM, NOISE_DIM>::from_diagonal(&q);
    let mut p_next = jac.fx * p * jac.fx.transpose() + fw_q * jac.fw.transpose();
    crate::state::symmetrize(&mut p_next);
    (next, p_next, jac)
}

/// Zero-order-hold propagator driven by the latest IMU reading.
#[derive(Debug, Clone, Default)]
pub struct Propagator {
    held: Option<ImuSample>,
    pub steps: usize,
    pub gap_warnings: usize,
}

impl Propagator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn held(&self) -> Option<&ImuSample> {
        self.held.as_ref()
    }

    pub fn set_imu(&mut self, sample: ImuSample) {
        self.held = Some(sample);
    }

    /// Moves `x` forward to time `t` with the held reading. Without a reading, or
    /// for non-positive intervals, only the timestamp advances.
    pub fn advance(&mut self, x: &mut State, p: &mut Covariance, t: f64, contact_frame: &Matrix3<f64>, cfg: &NoiseConfig) {
        let dt = t - x.timestamp;
        if dt <= 0.0 {
            return;
        }
        let Some(u) = self.held else {
            x.timestamp = t;
            return;
        };
        let step = if dt > MAX_STEP {
            warn!("data gap of {dt:.3} s at t={:.6}; capping propagation step to {MAX_STEP} s", x.timestamp);
            self.gap_warnings += 1;
            MAX_STEP
        } else {
            dt
        };
        let (next, p_next, _) = propagate(x, p, &u, contact_frame, step, cfg);
        *x = next;
        x.timestamp = t;
        *p = p_next;
        self.steps += 1;
    }
}

/// Propagates across a segment, stepping at the union of IMU and joint
/// timestamps and emitting the state at every joint timestamp.
///
/// `held` is the IMU reading in effect at the segment start, if any.
pub fn propagate_between(
    x: &State,
    p: &Covariance,
    held: Option<ImuSample>,
    imu: &[ImuSample],
    joints: &[JointSample],
    contact_frame: &Matrix3<f64>,
    cfg: &NoiseConfig,
) -> (State, Covariance, Vec<State>) {
    let mut state = x.clone();
    let mut cov = *p;
    let mut prop = Propagator { held, ..Propagator::default() };
    let mut outputs = Vec::with_capacity(joints.len());
    let (mut i, mut j) = (0, 0);
    while i < imu.len() || j < joints.len() {
        let take_imu = j >= joints.len() || (i < imu.len() && imu[i].t <= joints[j].t);
        if take_imu {
            prop.advance(&mut state, &mut cov, imu[i].t, contact_frame, cfg);
            prop.set_imu(imu[i]);
            i += 1;
        } else {
            prop.advance(&mut state, &mut cov, joints[j].t, contact_frame, cfg);
            outputs.push(state.clone());
            j += 1;
        }
    }
    (state, cov, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff;
    use crate::state::Leg;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn imu(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> ImuSample {
        ImuSample { t, gyro, accel }
    }

    fn random_imu(rng: &mut ChaCha8Rng) -> ImuSample {
        let mut v = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        imu(0.0, v(2.0), v(3.0) + Vector3::new(0.0, 0.0, 9.81))
    }

    #[test]
    fn equilibrium_and_free_fall() {
        let x = State::default();
        let f = process_model(&x, &imu(0.0, Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81)));
        assert_eq!(f, ErrorVector::zeros());
        let f = process_model(&x, &imu(0.0, Vector3::zeros(), Vector3::zeros()));
        assert_eq!(f.fixed_rows::<3>(VEL).into_owned(), x.gravity);
        let x = State { gyro_bias: Vector3::new(0.0, 0.0, 0.1), ..State::default() };
        let f = process_model(&x, &imu(0.0, Vector3::new(0.0, 0.0, 1.0), Vector3::zeros()));
        assert_relative_eq!(f.fixed_rows::<3>(ROT).into_owned(), Vector3::new(0.0, 0.0, 0.9));
    }

    #[test]
    fn small_step_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = State::random(&mut rng);
        let p = NoiseConfig::default().initial_covariance();
        let (next, p_next, jac) = propagate(&x, &p, &random_imu(&mut rng), &Matrix3::identity(), 1e-9, &NoiseConfig::default());
        assert!(next.boxminus(&x).norm() < 1e-7);
        assert!((jac.fx - Covariance::identity()).amax() < 1e-7);
        assert!((p_next - p).amax() < 1e-6);
    }

    #[test]
    fn pure_rotation_integrates_to_closed_form() {
        let cfg = NoiseConfig::default();
        let mut x = State::default();
        let mut p = cfg.initial_covariance();
        let u = imu(0.0, Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 9.81));
        for _ in 0..1000 {
            let (n, pn, _) = propagate(&x, &p, &u, &Matrix3::identity(), 1e-3, &cfg);
            x = n;
            p = pn;
        }
        let expected = exp_so3(&Vector3::new(0.0, 0.0, 1.0));
        assert!((x.rotation.matrix() - expected.matrix()).amax() < 1e-3);
        assert_relative_eq!(x.timestamp, 1.0, epsilon = 1e-9);
    }

    fn transition_fd(x: &State, u: &ImuSample, fko: &Matrix3<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let base = transition(x, u, fko, dt, None);
        let fx = numdiff::jacobian(
            |d| {
                let delta = ErrorVector::from_column_slice(d.as_slice());
                let moved = transition(&x.boxplus(&delta), u, fko, dt, None);
                DVector::from_column_slice(moved.boxminus(&base).as_slice())
            },
            21,
            numdiff::STEP,
        );
        let fw = numdiff::jacobian(
            |w| {
                let w = NoiseVector::from_column_slice(w.as_slice());
                let moved = transition(x, u, fko, dt, Some(&w));
                DVector::from_column_slice(moved.boxminus(&base).as_slice())
            },
            NOISE_DIM,
            numdiff::STEP,
        );
        (fx, fw)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let chain = crate::kinematics::KinematicChain::biped_leg();
        for _ in 0..100 {
            let x = State::random(&mut rng);
            let u = random_imu(&mut rng);
            let dt = rng.random_range(1e-3..0.1);
            let q = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let fko = *chain.fko(&q).matrix();
            let jac = process_jacobians(&x, &u, &fko, dt);
            let (fx, fw) = transition_fd(&x, &u, &fko, dt);
            let fx_a = DMatrix::from_column_slice(21, 21, jac.fx.as_slice());
            let fw_a = DMatrix::from_column_slice(21, NOISE_DIM, jac.fw.as_slice());
            assert!(numdiff::relative_error(&fx_a, &fx) < 1e-5);
            assert!(numdiff::relative_error(&fw_a, &fw) < 1e-5);
        }
    }

    #[test]
    fn error_transition_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let x = State::random(&mut rng);
            let u = random_imu(&mut rng);
            let dt = 0.005;
            let mut delta = ErrorVector::zeros();
            for i in 0..21 {
                delta[i] = rng.random_range(-1e-3..1e-3);
            }
            let jac = process_jacobians(&x, &u, &Matrix3::identity(), dt);
            let lhs = transition(&x.boxplus(&delta), &u, &Matrix3::identity(), dt, None)
                .boxminus(&transition(&x, &u, &Matrix3::identity(), dt, None));
            let err = (lhs - jac.fx * delta).norm();
            assert!(err <= 1e-6 + 10.0 * delta.norm_squared(), "err {err}");
        }
    }

    #[test]
    fn static_trace_grows() {
        let cfg = NoiseConfig::default();
        let x = State::default();
        let mut p = cfg.initial_covariance();
        let u = imu(0.0, Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81));
        let mut prev = p.trace();
        for _ in 0..100 {
            let (_, pn, _) = propagate(&x, &p, &u, &Matrix3::identity(), 0.005, &cfg);
            assert!(pn.trace() >= prev);
            prev = pn.trace();
            p = pn;
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = State::random(&mut rng);
        let u = random_imu(&mut rng);
        let p = NoiseConfig::default().initial_covariance();
        let a = propagate(&x, &p, &u, &Matrix3::identity(), 0.005, &NoiseConfig::default());
        let b = propagate(&x, &p, &u, &Matrix3::identity(), 0.005, &NoiseConfig::default());
        assert_eq!(a, b);
    }

    fn joint(t: f64) -> JointSample {
        JointSample { t, leg: Leg::Left, q: DVector::zeros(3), dq: DVector::zeros(3) }
    }

    #[test]
    fn single_sample_segment_equals_one_step() {
        let cfg = NoiseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = State::random(&mut rng);
        let p = cfg.initial_covariance();
        let mut u = random_imu(&mut rng);
        u.t = x.timestamp;
        let (xs, ps, out) = propagate_between(&x, &p, None, &[u], &[joint(0.004)], &Matrix3::identity(), &cfg);
        let (x1, p1, _) = propagate(&x, &p, &u, &Matrix3::identity(), 0.004, &cfg);
        assert_eq!(out.len(), 1);
        assert!(xs.boxminus(&x1).amax() < 1e-15);
        assert!((ps - p1).amax() < 1e-18);
    }

    #[test]
    fn output_count_follows_joint_rate() {
        let cfg = NoiseConfig::default();
        let imu_stream: Vec<_> = (0..200)
            .map(|k| imu(k as f64 * 0.005, Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81)))
            .collect();
        let joints: Vec<_> = (1..=1000).map(|k| joint(k as f64 * 1e-3)).collect();
        let (_, _, out) = propagate_between(&State::default(), &cfg.initial_covariance(), None, &imu_stream, &joints, &Matrix3::identity(), &cfg);
        assert_eq!(out.len(), 1000);
    }

    #[test]
    fn constant_velocity_segment() {
        let cfg = NoiseConfig::default();
        let v = Vector3::new(0.3, -0.2, 0.05);
        let x = State { velocity: v, position: Vector3::new(1.0, 2.0, 0.5), ..State::default() };
        let imu_stream: Vec<_> = (0..200)
            .map(|k| imu(k as f64 * 0.005, Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81)))
            .collect();
        let joints: Vec<_> = (1..=1000).map(|k| joint(k as f64 * 1e-3)).collect();
        let (xs, _, _) = propagate_between(&x, &cfg.initial_covariance(), None, &imu_stream, &joints, &Matrix3::identity(), &cfg);
        assert!((xs.position - (x.position + v * 1.0)).norm() < 1e-9);
    }

    #[test]
    fn gap_is_capped() {
        let cfg = NoiseConfig::default();
        let mut prop = Propagator::new();
        prop.set_imu(imu(0.0, Vector3::zeros(), Vector3::zeros()));
        let mut x = State::default();
        let mut p = cfg.initial_covariance();
        prop.advance(&mut x, &mut p, 0.5, &Matrix3::identity(), &cfg);
        assert_eq!(prop.gap_warnings, 1);
        assert_eq!(x.timestamp, 0.5);
        // Free fall for a single capped 0.1 s step only.
        assert_relative_eq!(x.velocity.z, -0.981, epsilon = 1e-12);
    }
}
