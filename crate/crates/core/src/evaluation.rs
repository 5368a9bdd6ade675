//! Trajectory metrics: time association, rigid alignment, APE, translational
//! RPE and velocity RMSE.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl PoseSample {
    fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<PoseSample>,
}

impl Trajectory {
    pub fn new(samples: Vec<PoseSample>) -> Result<Self> {
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Evaluation(format!(
                    "trajectory timestamps must increase strictly ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        for s in &samples {
            if (s.orientation.quaternion().norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Evaluation(format!("non-unit orientation at t={}", s.t)));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }
}

pub const DEFAULT_MAX_DT: f64 = 0.005;

/// Index of the element of sorted `times` nearest to `t`.
fn nearest(times: &[f64], t: f64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let i = times.partition_point(|&x| x < t);
    match (i.checked_sub(1), times.get(i)) {
        (Some(a), Some(&tb)) => Some(if t - times[a] <= tb - t { a } else { i }),
        (Some(a), None) => Some(a),
        (None, _) => Some(i),
    }
}

/// Pairs every ground-truth sample with the nearest estimate, dropping pairs
/// more than `max_dt` apart. Returns `(est index, gt index)`.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>> {
    let times = est.times();
    let pairs: Vec<_> = gt
        .samples
        .iter()
        .enumerate()
        .filter_map(|(j, g)| {
            let i = nearest(&times, g.t)?;
            ((times[i] - g.t).abs() <= max_dt).then_some((i, j))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::Evaluation(format!("no timestamp pairs within {max_dt} s")));
    }
    Ok(pairs)
}

/// Rigid transform mapping estimate coordinates onto ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Least-squares rotation and translation with `gt ≈ R est + t`.
pub fn umeyama_align(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Alignment> {
    if est.len() != gt.len() || est.len() < 3 {
        return Err(Error::Evaluation(format!("alignment needs at least 3 pairs, got {}", est.len().min(gt.len()))));
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let cov = est.iter().zip(gt).fold(Matrix3::zeros(), |acc, (e, g)| acc + (g - mu_g) * (e - mu_e).transpose()) / n;
    let spread = est.iter().map(|e| (e - mu_e).norm_squared()).sum::<f64>() / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s1 = svd.singular_values[order[0]];
    let s2 = svd.singular_values[order[1]];
    if !(s1 > 0.0) || s2 <= 1e-10 * s1.max(spread) {
        return Err(Error::Evaluation("degenerate geometry: aligned points are collinear".into()));
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = u * d * v_t;
    let rotation = Rotation3::from_matrix_unchecked(r);
    Ok(Alignment { rotation, translation: mu_g - rotation * mu_e })
}

/// RMSE of position errors after applying `alignment` to the estimate.
pub fn ape_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>], alignment: &Alignment) -> f64 {
    let n = est.len().min(gt.len());
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = est.iter().zip(gt).map(|(e, g)| (alignment.apply(e) - g).norm_squared()).sum();
    (sq / n as f64).sqrt()
}

/// Paired positions of associated samples.
pub fn paired_positions(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    pairs.iter().map(|&(i, j)| (est.samples[i].position, gt.samples[j].position)).unzip()
}

/// Associates, aligns and returns `(APE RMSE, alignment)`.
pub fn ape(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<(f64, Alignment)> {
    let pairs = associate(est, gt, max_dt)?;
    let (e, g) = paired_positions(est, gt, &pairs);
    let alignment = umeyama_align(&e, &g)?;
    Ok((ape_rmse(&e, &g, &alignment), alignment))
}

/// Translational relative pose error over ground-truth segments of at least
/// `delta` metres, as a percentage of each segment's arc length, reported as
/// the RMSE over all start samples.
pub fn rpe_percent(est: &Trajectory, gt: &Trajectory, delta: f64, max_dt: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Evaluation("RPE delta must be positive".into()));
    }
    let pairs = associate(est, gt, max_dt)?;
    let mut arc = Vec::with_capacity(pairs.len());
    let mut s = 0.0;
    for (k, &(_, j)) in pairs.iter().enumerate() {
        if k > 0 {
            s += (gt.samples[j].position - gt.samples[pairs[k - 1].1].position).norm();
        }
        arc.push(s);
    }
    if s < delta {
        return Err(Error::Evaluation(format!("trajectory length {s:.3} m is shorter than RPE delta {delta} m")));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut end = 0;
    for start in 0..pairs.len() {
        end = end.max(start);
        while end < pairs.len() && arc[end] - arc[start] < delta {
            end += 1;
        }
        if end == pairs.len() {
            break;
        }
        let (ei, gi) = pairs[start];
        let (ej, gj) = pairs[end];
        let rel_est = est.samples[ei].isometry().inverse() * est.samples[ej].isometry();
        let rel_gt = gt.samples[gi].isometry().inverse() * gt.samples[gj].isometry();
        let err = (rel_gt.inverse() * rel_est).translation.vector.norm();
        let pct = 100.0 * err / (arc[end] - arc[start]);
        sq += pct * pct;
        count += 1;
    }
    Ok((sq / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySample {
    pub t: f64,
    pub velocity: Vector3<f64>,
}

pub const VELOCITY_WINDOW: usize = 20;

/// Centered moving average over `window` samples, shrinking at the ends.
pub fn smooth(samples: &[VelocitySample], window: usize) -> Vec<VelocitySample> {
    let n = samples.len();
    let half = window / 2;
    let mut prefix = vec![Vector3::zeros(); n + 1];
    for (i, s) in samples.iter().enumerate() {
        prefix[i + 1] = prefix[i] + s.velocity;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (lo + window.max(1)).min(n);
            VelocitySample { t: samples[i].t, velocity: (prefix[hi] - prefix[lo]) / (hi - lo) as f64 }
        })
        .collect()
}

/// Central-difference velocity of a trajectory.
pub fn differentiate(traj: &Trajectory) -> Vec<VelocitySample> {
    let s = &traj.samples;
    let n = s.len();
    (0..n)
        .filter_map(|i| {
            let (a, b) = match (i.checked_sub(1), s.get(i + 1)) {
                (Some(a), Some(_)) => (a, i + 1),
                (None, Some(_)) => (i, i + 1),
                (Some(a), None) => (a, i),
                (None, None) => return None,
            };
            Some(VelocitySample { t: s[i].t, velocity: (s[b].position - s[a].position) / (s[b].t - s[a].t) })
        })
        .collect()
}

/// RMSE of `est` against `gt` smoothed with a centered `window`-sample moving
/// average, after rotating the estimate by `rotation`.
pub fn velocity_rmse(
    est: &[VelocitySample],
    gt: &[VelocitySample],
    window: usize,
    rotation: &Rotation3<f64>,
    max_dt: f64,
) -> Result<f64> {
    let smoothed = smooth(gt, window);
    let times: Vec<f64> = smoothed.iter().map(|s| s.t).collect();
    let mut sq = 0.0;
    let mut count = 0usize;
    for e in est {
        let Some(j) = nearest(&times, e.t) else { break };
        if (times[j] - e.t).abs() > max_dt {
            continue;
        }
        sq += (rotation * e.velocity - smoothed[j].velocity).norm_squared();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Evaluation("no overlapping velocity samples".into()));
    }
    Ok((sq / count as f64).sqrt())
}
