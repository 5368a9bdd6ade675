//! Central finite differences, used as the independent oracle for every
//! analytic Jacobian in the crate.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Default step for central differences.
pub const STEP: f64 = 1e-6;

/// Jacobian of `f: R^n -> R^m` at the origin of its argument.
pub fn jacobian<F>(f: F, n: usize, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(&DVector::zeros(n));
    let mut out = DMatrix::zeros(f0.len(), n);
    let mut e = DVector::zeros(n);
    for i in 0..n {
        e[i] = h;
        let fp = f(&e);
        e[i] = -h;
        let fm = f(&e);
        e[i] = 0.0;
        out.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    out
}

/// Jacobian of `f: R^3 -> R^3` at zero.
pub fn jacobian_3x3<F>(f: F, h: f64) -> Matrix3<f64>
where
    F: Fn(&Vector3<f64>) -> Vector3<f64>,
{
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = h;
        let fp = f(&e);
        e[i] = -h;
        let fm = f(&e);
        out.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    out
}

/// `‖analytic - numeric‖_F / max(‖numeric‖_F, floor)`.
pub fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let denom = numeric.norm().max(analytic.norm()).max(1e-3);
    (analytic - numeric).norm() / denom
}
