//! Runtime finite-difference audit of every analytic Jacobian.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::iekf::boxminus_jacobian;
use crate::kin_measurement::{position_measurement, velocity_measurement};
use crate::kinematics::KinematicChain;
use crate::lidar::{lidar_residual, PlaneCorrespondence};
use crate::numdiff::{jacobian, relative_error, STEP};
use crate::propagation::{process_jacobians, transition, NoiseVector};
use crate::state::{ErrorVector, ImuSample, JointSample, Leg, NoiseConfig, State, ERR_DIM, NOISE_DIM};

pub const TOLERANCE: f64 = 1e-5;
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_relative_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn vec3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn random_joint(rng: &mut ChaCha8Rng, m: usize) -> JointSample {
    JointSample {
        t: 0.0,
        leg: Leg::Left,
        q: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
        dq: DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)),
    }
}

fn to_dyn(v: &ErrorVector) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn state_fd(x: &State, f: impl Fn(&State) -> DVector<f64>) -> DMatrix<f64> {
    jacobian(|d| f(&x.boxplus(&ErrorVector::from_column_slice(d.as_slice()))), ERR_DIM, STEP)
}

fn run(name: &'static str, trials: usize, rng: &mut ChaCha8Rng, mut trial: impl FnMut(&mut ChaCha8Rng) -> f64) -> CheckResult {
    let max_relative_error = (0..trials).map(|_| trial(rng)).fold(0.0, f64::max);
    CheckResult { name, trials, max_relative_error }
}

/// Runs all checks with `trials` random configurations each.
pub fn check_all(seed: u64, trials: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NoiseConfig::default();
    let chain = KinematicChain::biped_leg();
    let mut out = Vec::new();

    let random_imu = |rng: &mut ChaCha8Rng| ImuSample {
        t: 0.0,
        gyro: vec3(rng, 2.0),
        accel: vec3(rng, 3.0) + Vector3::new(0.0, 0.0, 9.81),
    };
    let mut fw_cases = Vec::with_capacity(trials);
    out.push(run("F_x", trials, &mut rng, |rng| {
        let x = State::random(rng);
        let u = random_imu(rng);
        let dt = rng.random_range(1e-3..0.1);
        let q = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let frame: Matrix3<f64> = *chain.fko(&q).matrix();
        fw_cases.push((x.clone(), u, frame, dt));
        let base = transition(&x, &u, &frame, dt, None);
        let num = state_fd(&x, |s| to_dyn(&transition(s, &u, &frame, dt, None).boxminus(&base)));
        let ana = process_jacobians(&x, &u, &frame, dt).fx;
        relative_error(&DMatrix::from_column_slice(ERR_DIM, ERR_DIM, ana.as_slice()), &num)
    }));
    let mut cases = fw_cases.into_iter();
    out.push(run("F_w", trials, &mut rng, |_| {
        let (x, u, frame, dt) = cases.next().expect("one case per trial");
        let base = transition(&x, &u, &frame, dt, None);
        let num = jacobian(
            |w| {
                let w = NoiseVector::from_column_slice(w.as_slice());
                to_dyn(&transition(&x, &u, &frame, dt, Some(&w)).boxminus(&base))
            },
            NOISE_DIM,
            STEP,
        );
        let ana = process_jacobians(&x, &u, &frame, dt).fw;
        relative_error(&DMatrix::from_column_slice(ERR_DIM, NOISE_DIM, ana.as_slice()), &num)
    }));

    out.push(run("H_cv", trials, &mut rng, |rng| {
        let x = State::random(rng);
        let j = random_joint(rng, 3);
        let gyro = vec3(rng, 2.0);
        let ana = velocity_measurement(&x, &gyro, &j, &chain, &cfg).jacobian;
        let num = state_fd(&x, |s| {
            DVector::from_column_slice(velocity_measurement(s, &gyro, &j, &chain, &cfg).residual.as_slice())
        });
        relative_error(&DMatrix::from_column_slice(3, ERR_DIM, ana.as_slice()), &num)
    }));

    let mirrored = chain.mirrored();
    out.push(run("H_cp", trials, &mut rng, |rng| {
        let x = State::random(rng);
        let j = random_joint(rng, 3);
        let ana = position_measurement(&x, &j, &mirrored, &cfg).jacobian;
        let num = state_fd(&x, |s| DVector::from_column_slice(position_measurement(s, &j, &mirrored, &cfg).residual.as_slice()));
        relative_error(&DMatrix::from_column_slice(3, ERR_DIM, ana.as_slice()), &num)
    }));

    out.push(run("H_j", trials, &mut rng, |rng| {
        let x = State::random(rng);
        let corr = PlaneCorrespondence {
            normal: vec3(rng, 1.0).normalize(),
            anchor: vec3(rng, 5.0),
            point: Vector3::zeros(),
        };
        let p = vec3(rng, 8.0);
        let ana = lidar_residual(&x, &corr, &p, 0.02).1;
        let num = state_fd(&x, |s| DVector::from_element(1, lidar_residual(s, &corr, &p, 0.02).0));
        relative_error(&DMatrix::from_row_slice(1, ERR_DIM, ana.as_slice()), &num)
    }));

    out.push(run("J", trials, &mut rng, |rng| {
        let x_check = State::random(rng);
        let mut d = ErrorVector::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let scale = rng.random_range(0.0..2.5) / d.fixed_rows::<3>(0).norm();
        d.fixed_rows_mut::<3>(0).scale_mut(scale);
        let x_hat = x_check.boxplus(&d);
        let num = state_fd(&x_hat, |s| to_dyn(&s.boxminus(&x_check)));
        let ana = boxminus_jacobian(&x_hat, &x_check);
        relative_error(&DMatrix::from_column_slice(ERR_DIM, ERR_DIM, ana.as_slice()), &num)
    }));

    out.push(run("fk_jacobian", trials, &mut rng, |rng| {
        let q = DVector::from_fn(chain.dof(), |_, _| rng.random_range(-1.5..1.5));
        let num = jacobian(|d| DVector::from_column_slice(chain.fk(&(&q + d)).as_slice()), chain.dof(), STEP);
        let ana = chain.jacobian(&q);
        relative_error(&DMatrix::from_column_slice(3, chain.dof(), ana.as_slice()), &num)
    }));

    out
}
