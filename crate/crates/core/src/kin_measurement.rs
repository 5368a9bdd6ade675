//! Leg-odometry measurement models: base velocity and foothold position
//! residuals with their Jacobians and propagated encoder covariances.
//!
//! `fk(q)` is the stance foot position relative to the IMU, expressed in the IMU
//! frame. Residuals follow the convention `0 = z + H x̃ + w`, so `H` is the
//! derivative of `z(x ⊞ x̃)` at `x̃ = 0`.

use nalgebra::{DVector, Matrix3, SMatrix, Vector3};

use crate::kinematics::KinematicChain;
use crate::manifold::skew;
use crate::state::{JointSample, NoiseConfig, State, BG, PC, POS, ROT, VEL};

pub type Jacobian3 = SMatrix<f64, 3, 21>;

/// Step for the numerical `∂v_m/∂q`.
const JOINT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Residual3 {
    pub residual: Vector3<f64>,
    pub jacobian: Jacobian3,
    pub covariance: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicMeasurement {
    pub velocity: Residual3,
    pub position: Residual3,
}

/// Base velocity implied by a non-slipping stance foot:
/// `v_m = -R (J(q) q̇ + (ω_m - b_ω) × fk(q))`.
pub fn measured_velocity(
    x: &State,
    gyro: &Vector3<f64>,
    q: &DVector<f64>,
    dq: &DVector<f64>,
    chain: &KinematicChain,
) -> Vector3<f64> {
    let foot = chain.fk(q);
    let rel = chain.jacobian(q) * dq + (gyro - x.gyro_bias).cross(&foot);
    -(x.rotation * rel)
}

/// `z_cv = v̌ - v_m` with `H_cv` and `Σ_cv`.
///
/// `gyro` is the raw angular rate of the IMU sample held at the joint time.
pub fn velocity_measurement(
    x: &State,
    gyro: &Vector3<f64>,
    joint: &JointSample,
    chain: &KinematicChain,
    cfg: &NoiseConfig,
) -> Residual3 {
    let q = &joint.q;
    let dq = &joint.dq;
    let foot = chain.fk(q);
    let jac = chain.jacobian(q);
    let r = x.rotation.matrix();
    let lever = &jac * dq + (gyro - x.gyro_bias).cross(&foot);
    let v_meas = -(r * lever);

    let mut h = Jacobian3::zeros();
    h.fixed_view_mut::<3, 3>(0, ROT).copy_from(&(-r * skew(&lever)));
    h.fixed_view_mut::<3, 3>(0, VEL).copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(0, BG).copy_from(&(r * skew(&foot)));

    // Encoder noise mapped through the measurement function.
    let m = chain.dof();
    let mut g_q = nalgebra::OMatrix::<f64, nalgebra::U3, nalgebra::Dyn>::zeros(m);
    let mut qp = q.clone();
    for i in 0..m {
        qp[i] = q[i] + JOINT_FD_STEP;
        let fwd = measured_velocity(x, gyro, &qp, dq, chain);
        qp[i] = q[i] - JOINT_FD_STEP;
        let bwd = measured_velocity(x, gyro, &qp, dq, chain);
        qp[i] = q[i];
        g_q.set_column(i, &((fwd - bwd) / (2.0 * JOINT_FD_STEP)));
    }
    let g_dq = -(r * &jac);
    let cov = &g_q * g_q.transpose() * cfg.encoder_position.powi(2)
        + &g_dq * g_dq.transpose() * cfg.encoder_velocity.powi(2)
        + Matrix3::identity() * cfg.slip_velocity.powi(2);

    Residual3 { residual: x.velocity - v_meas, jacobian: h, covariance: symmetric(cov) }
}

/// `z_cp = p̌_c - p̌ - Ř fk(q)` with `H_cp` and `Σ_cp`.
pub fn position_measurement(x: &State, joint: &JointSample, chain: &KinematicChain, cfg: &NoiseConfig) -> Residual3 {
    let foot = chain.fk(&joint.q);
    let r = x.rotation.matrix();
    let residual = x.contact - x.position - r * foot;

    let mut h = Jacobian3::zeros();
    h.fixed_view_mut::<3, 3>(0, ROT).copy_from(&(r * skew(&foot)));
    h.fixed_view_mut::<3, 3>(0, POS).copy_from(&(-Matrix3::identity()));
    h.fixed_view_mut::<3, 3>(0, PC).copy_from(&Matrix3::identity());

    let g_q = -(r * chain.jacobian(&joint.q));
    let cov = &g_q * g_q.transpose() * cfg.encoder_position.powi(2)
        + Matrix3::identity() * cfg.contact_position.powi(2);
    Residual3 { residual, jacobian: h, covariance: symmetric(cov) }
}

pub fn kinematic_measurement(
    x: &State,
    gyro: &Vector3<f64>,
    joint: &JointSample,
    chain: &KinematicChain,
    cfg: &NoiseConfig,
) -> KinematicMeasurement {
    KinematicMeasurement {
        velocity: velocity_measurement(x, gyro, joint, chain, cfg),
        position: position_measurement(x, joint, chain, cfg),
    }
}

fn symmetric(m: Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff;
    use crate::state::{ErrorVector, Leg, BA, GRAV};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Rotation3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_joint(rng: &mut ChaCha8Rng, m: usize) -> JointSample {
        JointSample {
            t: 0.0,
            leg: Leg::Left,
            q: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
            dq: DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)),
        }
    }

    fn fd(f: impl Fn(&State) -> Vector3<f64>, x: &State) -> DMatrix<f64> {
        numdiff::jacobian(
            |d| {
                let delta = ErrorVector::from_column_slice(d.as_slice());
                DVector::from_column_slice(f(&x.boxplus(&delta)).as_slice())
            },
            21,
            numdiff::STEP,
        )
    }

    fn dyn3(h: &Jacobian3) -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 21, h.as_slice())
    }

    #[test]
    fn velocity_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let chain = KinematicChain::biped_leg();
        let cfg = NoiseConfig::default();
        for _ in 0..100 {
            let x = State::random(&mut rng);
            let j = random_joint(&mut rng, 3);
            let gyro = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let meas = velocity_measurement(&x, &gyro, &j, &chain, &cfg);
            let num = fd(|s| velocity_measurement(s, &gyro, &j, &chain, &cfg).residual, &x);
            assert!(numdiff::relative_error(&dyn3(&meas.jacobian), &num) < 1e-5);
        }
    }

    #[test]
    fn position_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let chain = KinematicChain::biped_leg().mirrored();
        let cfg = NoiseConfig::default();
        for _ in 0..100 {
            let x = State::random(&mut rng);
            let j = random_joint(&mut rng, 3);
            let meas = position_measurement(&x, &j, &chain, &cfg);
            let num = fd(|s| position_measurement(s, &j, &chain, &cfg).residual, &x);
            assert!(numdiff::relative_error(&dyn3(&meas.jacobian), &num) < 1e-5);
        }
    }

    #[test]
    fn stationary_leg_measures_zero_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let chain = KinematicChain::biped_leg();
        let x = State::random(&mut rng);
        let mut j = random_joint(&mut rng, 3);
        j.dq.fill(0.0);
        let meas = velocity_measurement(&x, &x.gyro_bias, &j, &chain, &NoiseConfig::default());
        assert_relative_eq!(meas.residual, x.velocity, epsilon = 1e-15);
    }

    #[test]
    fn direct_substitution() {
        // Single hinge about y with the foot 0.8 m below: J q̇ = [0.1, 0, 0] at q̇ = -0.125.
        let chain = KinematicChain::new(
            Rotation3::identity(),
            Vector3::zeros(),
            vec![crate::kinematics::Joint::revolute(Vector3::y(), Vector3::zeros())],
            Vector3::new(0.0, 0.0, -0.8),
        )
        .unwrap();
        let j = JointSample { t: 0.0, leg: Leg::Left, q: DVector::zeros(1), dq: DVector::from_vec(vec![-0.125]) };
        assert_relative_eq!(chain.fk(&j.q), Vector3::new(0.0, 0.0, -0.8));
        assert_relative_eq!(chain.jacobian(&j.q) * &j.dq, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
        let x = State::default();
        let v = measured_velocity(&x, &Vector3::zeros(), &j.q, &j.dq, &chain);
        assert_relative_eq!(v, Vector3::new(-0.1, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn position_residual_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let chain = KinematicChain::biped_leg();
        let cfg = NoiseConfig::default();
        let x = State::random(&mut rng);
        let j = random_joint(&mut rng, 3);
        let (reset, _) = crate::contact::reset_contact(&x, &cfg.initial_covariance(), &chain, &j.q, &cfg);
        assert!(position_measurement(&reset, &j, &chain, &cfg).residual.norm() < 1e-12);

        let eps = 0.013;
        let mut moved = x.clone();
        moved.position.x += eps;
        let a = position_measurement(&x, &j, &chain, &cfg).residual;
        let b = position_measurement(&moved, &j, &chain, &cfg).residual;
        assert_relative_eq!(b - a, Vector3::new(-eps, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn jacobian_block_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let chain = KinematicChain::biped_leg();
        let cfg = NoiseConfig::default();
        let x = State::random(&mut rng);
        let j = random_joint(&mut rng, 3);
        let m = kinematic_measurement(&x, &Vector3::new(0.3, 0.1, -0.2), &j, &chain, &cfg);
        let hv = m.velocity.jacobian;
        assert_eq!(hv.fixed_view::<3, 3>(0, VEL).into_owned(), Matrix3::identity());
        for block in [POS, BA, PC, GRAV] {
            assert_eq!(hv.fixed_view::<3, 3>(0, block).into_owned(), Matrix3::zeros());
        }
        let hp = m.position.jacobian;
        for block in [VEL, BG, BA, GRAV] {
            assert_eq!(hp.fixed_view::<3, 3>(0, block).into_owned(), Matrix3::zeros());
        }
    }

    #[test]
    fn covariances_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let chain = KinematicChain::biped_leg();
        for _ in 0..50 {
            let mut cfg = NoiseConfig::default();
            cfg.encoder_position = rng.random_range(1e-6..1e-2);
            cfg.encoder_velocity = rng.random_range(1e-6..1e-1);
            cfg.slip_velocity = rng.random_range(1e-6..1e-1);
            cfg.contact_position = rng.random_range(1e-6..1e-1);
            let x = State::random(&mut rng);
            let j = random_joint(&mut rng, 3);
            let m = kinematic_measurement(&x, &Vector3::zeros(), &j, &chain, &cfg);
            for cov in [m.velocity.covariance, m.position.covariance] {
                assert!(cov.cholesky().is_some());
                assert_eq!(cov, cov.transpose());
            }
        }
    }

    #[test]
    fn residual_is_pure_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let chain = KinematicChain::biped_leg();
        let cfg = NoiseConfig::default();
        for _ in 0..20 {
            let x = State::random(&mut rng);
            let j = random_joint(&mut rng, 3);
            let gyro = Vector3::new(0.2, -0.1, 0.4);
            let z = velocity_measurement(&x, &gyro, &j, &chain, &cfg).residual;
            let vm = measured_velocity(&x, &gyro, &j.q, &j.dq, &chain);
            let c = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let shifted = (x.velocity + c) - (vm + c);
            assert_relative_eq!(z, shifted, epsilon = 1e-12);
        }
    }
}
