//! Iterated error-state Kalman update on the state manifold.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::manifold::a_matrix_inverse;
use crate::state::{symmetrize, Covariance, ErrorVector, State, ERR_DIM, ROT};

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// Independent rows with these variances.
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

/// A group of residual rows sharing one noise block.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBlock {
    pub residual: DVector<f64>,
    /// `rows x 21`, derivative of the residual with respect to `δx`.
    pub jacobian: DMatrix<f64>,
    pub noise: NoiseModel,
}

impl MeasurementBlock {
    pub fn new(residual: DVector<f64>, jacobian: DMatrix<f64>, noise: DMatrix<f64>) -> Self {
        debug_assert_eq!(residual.len(), jacobian.nrows());
        debug_assert_eq!(jacobian.ncols(), ERR_DIM);
        debug_assert_eq!(noise.shape(), (residual.len(), residual.len()));
        Self { residual, jacobian, noise: NoiseModel::Dense(noise) }
    }

    pub fn diagonal(residual: DVector<f64>, jacobian: DMatrix<f64>, variances: DVector<f64>) -> Self {
        debug_assert_eq!(residual.len(), jacobian.nrows());
        debug_assert_eq!(jacobian.ncols(), ERR_DIM);
        debug_assert_eq!(variances.len(), residual.len());
        Self { residual, jacobian, noise: NoiseModel::Diagonal(variances) }
    }

    pub fn rows(&self) -> usize {
        self.residual.len()
    }

    /// `(R⁻¹H, R⁻¹z)`.
    fn whitened(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        match &self.noise {
            NoiseModel::Diagonal(var) => {
                if var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::SingularInformation { condition: f64::INFINITY });
                }
                let mut h = self.jacobian.clone();
                for (mut row, v) in h.row_iter_mut().zip(var.iter()) {
                    row /= *v;
                }
                Ok((h, self.residual.component_div(var)))
            }
            NoiseModel::Dense(r) => {
                let chol =
                    Cholesky::new(r.clone()).ok_or(Error::SingularInformation { condition: f64::INFINITY })?;
                Ok((chol.solve(&self.jacobian), chol.solve(&self.residual)))
            }
        }
    }
}

/// Source of residual blocks, re-linearized at every iterate.
pub trait MeasurementProvider {
    fn linearize(&mut self, x: &State) -> Result<Vec<MeasurementBlock>>;
}

impl<F> MeasurementProvider for F
where
    F: FnMut(&State) -> Result<Vec<MeasurementBlock>>,
{
    fn linearize(&mut self, x: &State) -> Result<Vec<MeasurementBlock>> {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IekfOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IekfOptions {
    fn default() -> Self {
        Self { max_iterations: 5, tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub state: State,
    pub covariance: Covariance,
    pub iterations: usize,
    pub converged: bool,
    pub rows: usize,
    /// Every iterate, starting with the prior.
    pub trace: Vec<State>,
}

/// `∂((x̂ ⊞ δ) ⊟ x̌)/∂δ` at `δ = 0`.
pub fn boxminus_jacobian(x_hat: &State, x_check: &State) -> Covariance {
    let dtheta = x_hat.boxminus(x_check).fixed_rows::<3>(ROT).into_owned();
    let mut j = Covariance::identity();
    j.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(&a_matrix_inverse(&dtheta).transpose());
    j
}

struct Information {
    hrh: Covariance,
    hrz: ErrorVector,
    weighted_sq: f64,
    rows: usize,
}

fn accumulate(blocks: &[MeasurementBlock]) -> Result<Information> {
    let mut info = Information { hrh: Covariance::zeros(), hrz: ErrorVector::zeros(), weighted_sq: 0.0, rows: 0 };
    for b in blocks {
        if b.rows() == 0 {
            continue;
        }
        let (rinv_h, rinv_z) = b.whitened()?;
        let hrh = b.jacobian.transpose() * &rinv_h;
        let hrz = b.jacobian.transpose() * &rinv_z;
        info.hrh += Covariance::from_column_slice(hrh.as_slice());
        info.hrz += ErrorVector::from_column_slice(hrz.as_slice());
        info.weighted_sq += b.residual.dot(&rinv_z);
        info.rows += b.rows();
    }
    Ok(info)
}

fn condition(m: &Covariance) -> f64 {
    let eig = SymmetricEigen::new(*m);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

const MAX_CONDITION: f64 = 1e14;

/// Inverse of a symmetric positive-definite matrix. The condition number is
/// estimated from the spread of the Cholesky pivots, and computed exactly
/// only when the factorization fails.
fn checked_inverse(m: &Covariance) -> Result<Covariance> {
    let mut sym = *m;
    symmetrize(&mut sym);
    let Some(chol) = Cholesky::new(sym) else {
        return Err(Error::SingularInformation { condition: condition(&sym) });
    };
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let estimate = (hi / lo).powi(2);
    if !(estimate < MAX_CONDITION) {
        return Err(Error::SingularInformation { condition: estimate });
    }
    Ok(chol.inverse())
}

/// Information-form gain `(HᵀR⁻¹H + P⁻¹)⁻¹ HᵀR⁻¹` for the stacked blocks.
pub fn kalman_gain(p: &Covariance, blocks: &[MeasurementBlock]) -> Result<DMatrix<f64>> {
    let info = accumulate(blocks)?;
    let s = checked_inverse(&(info.hrh + checked_inverse(p)?))?;
    let mut gain_cols = Vec::new();
    for b in blocks {
        let (rinv_h, _) = b.whitened()?;
        let s_dyn = DMatrix::from_column_slice(ERR_DIM, ERR_DIM, s.as_slice());
        gain_cols.push(s_dyn * rinv_h.transpose());
    }
    let cols: usize = gain_cols.iter().map(|g| g.ncols()).sum();
    let mut k = DMatrix::zeros(ERR_DIM, cols);
    let mut c = 0;
    for g in gain_cols {
        k.columns_mut(c, g.ncols()).copy_from(&g);
        c += g.ncols();
    }
    Ok(k)
}

/// MAP cost `‖x ⊟ x̌‖²_{P̌⁻¹} + Σ ‖h_j(x)‖²_{R_j⁻¹}`.
pub fn map_cost(
    x: &State,
    x_check: &State,
    p_check: &Covariance,
    providers: &mut [&mut dyn MeasurementProvider],
) -> Result<f64> {
    let d = x.boxminus(x_check);
    let prior = d.dot(&(checked_inverse(p_check)? * d));
    let mut blocks = Vec::new();
    for p in providers.iter_mut() {
        blocks.extend(p.linearize(x)?);
    }
    Ok(prior + accumulate(&blocks)?.weighted_sq)
}

/// Iterated update: every iterate re-linearizes all providers, solves the
/// information-form normal equations with the prior transported through the
/// boxminus Jacobian, and retracts the correction.
pub fn iterated_update(
    x_check: &State,
    p_check: &Covariance,
    providers: &mut [&mut dyn MeasurementProvider],
    opts: &IekfOptions,
) -> Result<UpdateOutcome> {
    let p_check_inv = checked_inverse(p_check)?;
    let mut x = x_check.clone();
    let mut trace = vec![x.clone()];
    let mut iterations = 0;
    let mut converged = false;
    let mut posterior = *p_check;
    let mut rows = 0;

    while iterations < opts.max_iterations.max(1) {
        let mut blocks = Vec::new();
        for p in providers.iter_mut() {
            blocks.extend(p.linearize(&x)?);
        }
        let info = accumulate(&blocks)?;
        if info.rows == 0 {
            return Err(Error::NoMeasurements);
        }
        rows = info.rows;
        let j = boxminus_jacobian(&x, x_check);
        // P⁻¹ = Jᵀ P̌⁻¹ J, the prior expressed in the tangent space at x.
        let p_inv = j.transpose() * p_check_inv * j;
        let s = checked_inverse(&(info.hrh + p_inv))?;
        let kh = s * info.hrh;
        let kz = s * info.hrz;
        let j_inv = checked_jinv(&j)?;
        let offset = j_inv * x.boxminus(x_check);
        let delta = -kz - (Covariance::identity() - kh) * offset;
        x = x.boxplus(&delta);
        iterations += 1;
        trace.push(x.clone());
        let p_j = j_inv * p_check * j_inv.transpose();
        posterior = (Covariance::identity() - kh) * p_j;
        if delta.norm() < opts.tolerance {
            converged = true;
            break;
        }
    }
    symmetrize(&mut posterior);
    Ok(UpdateOutcome { state: x, covariance: posterior, iterations, converged, rows, trace })
}

fn checked_jinv(j: &Covariance) -> Result<Covariance> {
    j.try_inverse().ok_or(Error::SingularInformation { condition: f64::INFINITY })
}
