//! SO(3) algebra and the boxplus/boxminus operators of the composite state
//! manifold SO(3) x R^18.
//!
//! Conventions used throughout the crate:
//!
//! * rotations are right-perturbed: `R ⊞ δθ = R · exp(δθ)`;
//! * the error state is ordered `[δθ, δp, δv, δb_ω, δb_a, δp_c, δg]`, see
//!   [`crate::state::ERR_DIM`] and the block offsets next to it;
//! * `A(u)` is the left Jacobian of SO(3), i.e. the transpose of the right
//!   Jacobian `J_r(u)`, so that `A(u)^{-T} = J_r(u)^{-1}`.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::state::{ErrorVector, State, BA, BG, GRAV, PC, POS, ROT, VEL};

const EXP_SMALL_ANGLE: f64 = 1e-8;
const A_INV_SMALL_ANGLE: f64 = 1e-7;
const A_SMALL_ANGLE: f64 = 1e-5;
/// Below `π - LOG_NEAR_PI` the axis is taken from the antisymmetric part.
const LOG_NEAR_PI: f64 = 1e-3;

/// Skew-symmetric matrix such that `skew(v) * w == v.cross(&w)`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part of `m`.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Exponential map R^3 -> SO(3) (Rodrigues).
pub fn exp_so3(u: &Vector3<f64>) -> Rotation3<f64> {
    let theta = u.norm();
    let k = skew(u);
    let m = if theta < EXP_SMALL_ANGLE {
        Matrix3::identity() + k + k * k * 0.5
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + k * a + k * k * b
    };
    Rotation3::from_matrix_unchecked(m)
}

/// Logarithm map SO(3) -> R^3, returning the rotation vector with angle in `[0, π]`.
///
/// At exactly π the axis sign is ambiguous; the returned axis then has its first
/// nonzero component positive.
pub fn log_so3(r: &Rotation3<f64>) -> Vector3<f64> {
    let m = r.matrix();
    let w = vee(m);
    let s = w.norm();
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);

    if theta < 1e-6 {
        // sin θ / θ ≈ 1 - θ²/6
        return w * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - LOG_NEAR_PI {
        return w * (theta / s);
    }

    // Near π: extract the axis from the symmetric part, a aᵀ = (S - c I) / (1 - c).
    let sym = (m + m.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * c) / (1.0 - c);
    let mut best = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = aat.column(best).into_owned();
    axis /= axis.norm();
    if s > 1e-12 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else {
        let first = axis.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        if first < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// `A(u)^{-1} = I - ⌊u⌋/2 + (1 - (‖u‖/2) cot(‖u‖/2)) ⌊u⌋² / ‖u‖²`.
pub fn a_matrix_inverse(u: &Vector3<f64>) -> Matrix3<f64> {
    let theta = u.norm();
    let k = skew(u);
    if theta < A_INV_SMALL_ANGLE {
        return Matrix3::identity() - k * 0.5 + k * k / 12.0;
    }
    let half = 0.5 * theta;
    let alpha = half / half.tan();
    Matrix3::identity() - k * 0.5 + k * k * ((1.0 - alpha) / (theta * theta))
}

/// `A(u) = I + (1 - cos‖u‖)/‖u‖² ⌊u⌋ + (‖u‖ - sin‖u‖)/‖u‖³ ⌊u⌋²` (left Jacobian).
pub fn a_matrix(u: &Vector3<f64>) -> Matrix3<f64> {
    let theta = u.norm();
    let k = skew(u);
    if theta < A_SMALL_ANGLE {
        return Matrix3::identity() + k * 0.5 + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() + k * ((1.0 - theta.cos()) / t2) + k * k * ((theta - theta.sin()) / (t2 * theta))
}

/// Right Jacobian of SO(3): `exp(u + ε) ≈ exp(u) exp(J_r(u) ε)`.
#[inline]
pub fn right_jacobian(u: &Vector3<f64>) -> Matrix3<f64> {
    a_matrix(u).transpose()
}

/// `x ⊞ δ`: rotation composes on the right, Euclidean blocks add.
pub fn boxplus(x: &State, delta: &ErrorVector) -> State {
    let dtheta = delta.fixed_rows::<3>(ROT).into_owned();
    State {
        rotation: x.rotation * exp_so3(&dtheta),
        position: x.position + delta.fixed_rows::<3>(POS),
        velocity: x.velocity + delta.fixed_rows::<3>(VEL),
        gyro_bias: x.gyro_bias + delta.fixed_rows::<3>(BG),
        accel_bias: x.accel_bias + delta.fixed_rows::<3>(BA),
        contact: x.contact + delta.fixed_rows::<3>(PC),
        gravity: x.gravity + delta.fixed_rows::<3>(GRAV),
        timestamp: x.timestamp,
    }
}

/// `x2 ⊟ x1`, the inverse of [`boxplus`] for rotation offsets below π.
pub fn boxminus(x2: &State, x1: &State) -> ErrorVector {
    let mut d = ErrorVector::zeros();
    d.fixed_rows_mut::<3>(ROT)
        .copy_from(&log_so3(&(x1.rotation.transpose() * x2.rotation)));
    d.fixed_rows_mut::<3>(POS).copy_from(&(x2.position - x1.position));
    d.fixed_rows_mut::<3>(VEL).copy_from(&(x2.velocity - x1.velocity));
    d.fixed_rows_mut::<3>(BG).copy_from(&(x2.gyro_bias - x1.gyro_bias));
    d.fixed_rows_mut::<3>(BA).copy_from(&(x2.accel_bias - x1.accel_bias));
    d.fixed_rows_mut::<3>(PC).copy_from(&(x2.contact - x1.contact));
    d.fixed_rows_mut::<3>(GRAV).copy_from(&(x2.gravity - x1.gravity));
    d
}

/// Re-orthonormalizes a rotation that drifted through repeated products.
pub fn renormalize(r: &Rotation3<f64>) -> Rotation3<f64> {
    let svd = r.matrix().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut m = u * vt;
    if m.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        m = u2 * vt;
    }
    Rotation3::from_matrix_unchecked(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * scale
    }

    #[test]
    fn skew_cases() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let s = skew(&Vector3::x());
        assert_eq!(s, Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = random_vec(&mut rng, 3.0);
            let w = random_vec(&mut rng, 3.0);
            assert_relative_eq!(skew(&v) * v, Vector3::zeros(), epsilon = 1e-14);
            assert_relative_eq!(skew(&v) * w, v.cross(&w), epsilon = 1e-14);
            assert_relative_eq!(vee(&skew(&v)), v);
        }
    }

    #[test]
    fn exp_closed_forms() {
        assert_eq!(*exp_so3(&Vector3::zeros()).matrix(), Matrix3::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*r.matrix(), expected, epsilon = 1e-15);
    }

    #[test]
    fn exp_inverse_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let u = random_vec(&mut rng, 3.0);
            let prod = exp_so3(&u) * exp_so3(&-u);
            assert_relative_eq!(*prod.matrix(), Matrix3::identity(), epsilon = 1e-12);
            let r = exp_so3(&u);
            assert_relative_eq!(r.matrix().transpose() * r.matrix(), Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(r.matrix().determinant(), 1.0, epsilon = 1e-12);
        }
        let tiny = exp_so3(&Vector3::new(1e-9, -2e-9, 3e-10));
        assert_relative_eq!(tiny.matrix().determinant(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_cases() {
        assert_eq!(log_so3(&Rotation3::identity()), Vector3::zeros());
        let u = Vector3::new(0.3, -0.2, 0.1);
        assert_relative_eq!(log_so3(&exp_so3(&u)), u, epsilon = 1e-12);
        let r = Rotation3::from_matrix_unchecked(Matrix3::new(
            1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0,
        ));
        assert_relative_eq!(log_so3(&r), Vector3::new(PI, 0.0, 0.0), epsilon = 1e-12);
        let r = exp_so3(&Vector3::new(0.0, -PI, 0.0));
        assert_relative_eq!(log_so3(&r), Vector3::new(0.0, PI, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn log_near_pi_keeps_sign() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        for eps in [1e-2, 1e-4, 1e-6] {
            let u = axis * (PI - eps);
            assert_relative_eq!(log_so3(&exp_so3(&u)), u, epsilon = 1e-8);
            let u = -axis * (PI - eps);
            assert_relative_eq!(log_so3(&exp_so3(&u)), u, epsilon = 1e-8);
        }
    }

    #[test]
    fn a_inverse_limit_and_continuity() {
        assert_eq!(a_matrix_inverse(&Vector3::zeros()), Matrix3::identity());
        let dir = Vector3::new(0.2, -0.7, 0.4).normalize();
        let below = a_matrix_inverse(&(dir * (A_INV_SMALL_ANGLE * (1.0 - 1e-6))));
        let above = a_matrix_inverse(&(dir * (A_INV_SMALL_ANGLE * (1.0 + 1e-6))));
        assert_relative_eq!(below, above, epsilon = 1e-10);
    }

    /// `A(u)` against its numerical definition, and the closed form of `A⁻¹`
    /// against the numerical derivative of `log(exp(u) exp(ε))`.
    #[test]
    fn a_matrices_match_numerical_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cases: Vec<Vector3<f64>> = (0..100).map(|_| random_vec(&mut rng, 1.7)).collect();
        cases.push(Vector3::new(0.0, 0.0, FRAC_PI_2));
        for u in cases {
            let rinv = exp_so3(&u).inverse();
            let jr = numdiff::jacobian_3x3(|e| log_so3(&(rinv * exp_so3(&(u + e)))), 1e-6);
            let a_num = jr.transpose();
            assert_relative_eq!(a_matrix(&u), a_num, epsilon = 1e-8);
            assert_relative_eq!(a_matrix_inverse(&u) * a_num, Matrix3::identity(), epsilon = 1e-8);

            let r = exp_so3(&u);
            let jr_inv = numdiff::jacobian_3x3(|e| log_so3(&(r * exp_so3(e))), 1e-6);
            assert_relative_eq!(a_matrix_inverse(&u).transpose(), jr_inv, epsilon = 1e-8);
        }
        let a = a_matrix_inverse(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_relative_eq!(a[(0, 0)], PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn boxplus_boxminus_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = State::random(&mut rng);
        assert_eq!(boxplus(&x, &ErrorVector::zeros()), x);
        assert_eq!(boxminus(&x, &x), ErrorVector::zeros());
    }

    #[test]
    fn euclidean_blocks_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = State::random(&mut rng);
        let mut d1 = ErrorVector::zeros();
        let mut d2 = ErrorVector::zeros();
        for i in 0..21 {
            d1[i] = rng.random_range(-1.0..1.0);
            d2[i] = rng.random_range(-1.0..1.0);
        }
        let a = boxplus(&boxplus(&x, &d1), &d2);
        let b = boxplus(&boxplus(&x, &d2), &d1);
        let diff = boxminus(&a, &b);
        assert!(diff.rows(3, 18).norm() < 1e-12);
        assert!(diff.rows(0, 3).norm() > 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn boxplus_round_trip(seed in any::<u64>(), mag in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = State::random(&mut rng);
            let mut delta = ErrorVector::zeros();
            for i in 0..21 {
                delta[i] = rng.random_range(-5.0..5.0);
            }
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if dir.norm() > 1e-3 {
                delta.fixed_rows_mut::<3>(ROT).copy_from(&(dir.normalize() * mag));
            }
            let back = boxminus(&boxplus(&x, &delta), &x);
            prop_assert!((back - delta).amax() < 1e-9);
        }

        #[test]
        fn log_exp_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, mag in 1e-10f64..(PI - 0.1)) {
            let dir = Vector3::new(x, y, z);
            prop_assume!(dir.norm() > 1e-3);
            let u = dir.normalize() * mag;
            prop_assert!((log_so3(&exp_so3(&u)) - u).amax() < 1e-9);
        }
    }
}
