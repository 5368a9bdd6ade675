//! LiDAR measurement path: motion compensation by IMU back-propagation, a
//! voxel-hashed point map, plane association and the point-to-plane residual.

use std::collections::{HashMap, HashSet};

use nalgebra::{Matrix3, Rotation3, SMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{exp_so3, skew};
use crate::state::{ImuSample, State, POS, ROT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    /// Position in the sensor frame, m.
    pub position: Vector3<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub end_time: f64,
    pub points: Vec<LidarPoint>,
}

impl LidarScan {
    pub fn start_time(&self) -> f64 {
        self.points.iter().map(|p| p.t).fold(self.end_time, f64::min)
    }
}

/// LiDAR pose in the IMU frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::new(0.05, 0.0, 0.3) }
    }
}

impl Extrinsics {
    pub fn to_imu(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_lidar(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }
}

/// Largest tolerated hole in IMU coverage while deskewing a scan, s.
pub const DESKEW_MAX_GAP: f64 = 0.05;

/// Maps every point of `scan` into the IMU frame at the scan end time.
///
/// Starting from `end_state` (stamped at the scan end), the IMU model is
/// integrated backwards under zero-order hold with the biases held constant;
/// each point is moved through the pose at its own sample time.
pub fn deskew(scan: &LidarScan, imu: &[ImuSample], end_state: &State, ext: &Extrinsics) -> Result<Vec<Vector3<f64>>> {
    let t_end = scan.end_time;
    let t_start = scan.start_time();

    // IMU samples that drive [t_start, t_end]: the last one at or before t_start
    // and every one inside the window.
    let first = imu.iter().rposition(|s| s.t <= t_start).unwrap_or(0);
    let last = imu.iter().rposition(|s| s.t <= t_end);
    let segment = match last {
        Some(last) if last >= first => &imu[first..=last],
        _ => {
            return Err(Error::DeskewGap { scan_end: t_end, gap: t_end - t_start, limit: DESKEW_MAX_GAP });
        }
    };

    let mut gap = (segment[0].t - t_start).max(0.0);
    for w in segment.windows(2) {
        gap = gap.max(w[1].t - w[0].t.max(t_start));
    }
    gap = gap.max(t_end - segment[segment.len() - 1].t.max(t_start));
    if gap > DESKEW_MAX_GAP {
        return Err(Error::DeskewGap { scan_end: t_end, gap, limit: DESKEW_MAX_GAP });
    }

    let mut order: Vec<usize> = (0..scan.points.len()).collect();
    order.sort_by(|&a, &b| scan.points[b].t.total_cmp(&scan.points[a].t));

    // Pose relative to the scan end, integrated backwards in world-aligned axes.
    let r_end_inv = end_state.rotation.inverse();
    let mut rot = end_state.rotation;
    let mut pos = Vector3::zeros();
    let mut vel = end_state.velocity;
    let mut t_b = t_end;
    let mut out = vec![Vector3::zeros(); scan.points.len()];
    let mut next = order.iter().peekable();

    for (k, sample) in segment.iter().enumerate().rev() {
        // Reading `sample` is held on [t_a, t_b].
        let t_a = if k == 0 { f64::NEG_INFINITY } else { sample.t };
        let omega = sample.gyro - end_state.gyro_bias;
        let acc = sample.accel - end_state.accel_bias;
        let world_acc = rot * acc + end_state.gravity;
        while let Some(&&idx) = next.peek() {
            let p = &scan.points[idx];
            if p.t < t_a {
                break;
            }
            let dt = t_b - p.t;
            let r_t = rot * exp_so3(&(-omega * dt));
            let p_t = pos - vel * dt + world_acc * (0.5 * dt * dt);
            out[idx] = r_end_inv * (r_t * ext.to_imu(&p.position) + p_t);
            next.next();
        }
        if k == 0 {
            break;
        }
        let dt = t_b - t_a;
        let r_a = rot * exp_so3(&(-omega * dt));
        pos = pos - vel * dt + world_acc * (0.5 * dt * dt);
        vel -= world_acc * dt;
        rot = r_a;
        t_b = t_a;
    }
    Ok(out)
}

/// Parameters of the map and of plane association.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Voxel edge length, m.
    pub resolution: f64,
    /// Downsampling cell edge length, m.
    pub downsample: f64,
    pub neighbors: usize,
    /// Largest distance of any fitted neighbor from its plane, m.
    pub plane_gate: f64,
    /// Largest distance of the query point from the fitted plane, m.
    pub association_gate: f64,
    /// Points used from each scan (uniform stride); 0 keeps all.
    pub max_points_per_scan: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            resolution: 0.5,
            downsample: 0.25,
            neighbors: 5,
            plane_gate: 0.03,
            association_gate: 0.06,
            max_points_per_scan: 0,
        }
    }
}

type VoxelKey = [i64; 3];

fn voxel_of(p: &Vector3<f64>, size: f64) -> VoxelKey {
    [(p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64]
}

/// Hash map from voxel coordinates to the points stored in that voxel.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    resolution: f64,
    downsample: f64,
    voxels: HashMap<VoxelKey, Vec<Vector3<f64>>>,
    occupied: HashSet<VoxelKey>,
    len: usize,
}

impl VoxelMap {
    pub fn new(resolution: f64, downsample: f64) -> Self {
        assert!(resolution > 0.0 && downsample > 0.0);
        Self { resolution, downsample, voxels: HashMap::new(), occupied: HashSet::new(), len: 0 }
    }

    pub fn from_config(cfg: &MapConfig) -> Self {
        Self::new(cfg.resolution, cfg.downsample)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Inserts world-frame points, keeping the first point that lands in each
    /// downsampling cell.
    pub fn insert(&mut self, points: &[Vector3<f64>]) {
        for p in points {
            if !p.iter().all(|c| c.is_finite()) {
                continue;
            }
            if self.occupied.insert(voxel_of(p, self.downsample)) {
                self.voxels.entry(voxel_of(p, self.resolution)).or_default().push(*p);
                self.len += 1;
            }
        }
    }

    /// Points stored in the voxel containing `p`.
    pub fn voxel_points(&self, p: &Vector3<f64>) -> &[Vector3<f64>] {
        self.voxels.get(&voxel_of(p, self.resolution)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Up to `k` nearest stored points within the 3x3x3 voxel neighborhood,
    /// nearest first.
    pub fn nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<Vector3<f64>> {
        let c = voxel_of(query, self.resolution);
        let mut found: Vec<(f64, Vector3<f64>)> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(pts) = self.voxels.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        found.extend(pts.iter().map(|p| ((p - query).norm_squared(), *p)));
                    }
                }
            }
        }
        let order = |a: &(f64, Vector3<f64>), b: &(f64, Vector3<f64>)| {
            a.0.total_cmp(&b.0)
                .then(a.1.x.total_cmp(&b.1.x))
                .then(a.1.y.total_cmp(&b.1.y))
                .then(a.1.z.total_cmp(&b.1.z))
        };
        if k == 0 {
            return Vec::new();
        }
        if found.len() > k {
            found.select_nth_unstable_by(k - 1, order);
            found.truncate(k);
        }
        found.sort_by(order);
        found.into_iter().map(|(_, p)| p).collect()
    }
}

/// Local plane matched to a LiDAR point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCorrespondence {
    /// Unit plane normal.
    pub normal: Vector3<f64>,
    /// Point on the plane (centroid of the fitted neighbors).
    pub anchor: Vector3<f64>,
    /// The query point in the world frame at association time.
    pub point: Vector3<f64>,
}

/// Total least-squares plane through `points`: returns `(normal, centroid)`.
///
/// The normal is the eigenvector of the scatter matrix with the smallest
/// eigenvalue, signed so that its largest-magnitude component is positive.
pub fn fit_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let scatter = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let (imin, _) = eig.eigenvalues.argmin();
    let mut normal: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
    let norm = normal.norm();
    if !(norm > 0.0) {
        return None;
    }
    normal /= norm;
    if normal[normal.iamax()] < 0.0 {
        normal = -normal;
    }
    Some((normal, centroid))
}

/// Associates a world-frame point with a plane fitted to its map neighbors.
pub fn find_correspondence(map: &VoxelMap, point: &Vector3<f64>, cfg: &MapConfig) -> Option<PlaneCorrespondence> {
    let neighbors = map.nearest(point, cfg.neighbors);
    if neighbors.len() < cfg.neighbors {
        return None;
    }
    let (normal, anchor) = fit_plane(&neighbors)?;
    if neighbors.iter().any(|p| normal.dot(&(p - anchor)).abs() > cfg.plane_gate) {
        return None;
    }
    if normal.dot(&(point - anchor)).abs() > cfg.association_gate {
        return None;
    }
    Some(PlaneCorrespondence { normal, anchor, point: *point })
}

pub type RowJacobian = SMatrix<f64, 1, 21>;

/// Point-to-plane residual `h = uᵀ(Ř p_I + p̌ - q)` of an IMU-frame point, its
/// Jacobian and the noise variance `σ_L²`.
pub fn lidar_residual(
    x: &State,
    corr: &PlaneCorrespondence,
    point_imu: &Vector3<f64>,
    sigma: f64,
) -> (f64, RowJacobian, f64) {
    let world = x.rotation * point_imu + x.position;
    let h = corr.normal.dot(&(world - corr.anchor));
    let mut jac = RowJacobian::zeros();
    let rot_block = -(corr.normal.transpose() * x.rotation.matrix() * skew(point_imu));
    jac.fixed_view_mut::<1, 3>(0, ROT).copy_from(&rot_block);
    jac.fixed_view_mut::<1, 3>(0, POS).copy_from(&corr.normal.transpose());
    (h, jac, sigma * sigma)
}

/// World-frame position of an IMU-frame point.
pub fn to_world(x: &State, point_imu: &Vector3<f64>) -> Vector3<f64> {
    x.rotation * point_imu + x.position
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff;
    use crate::state::ErrorVector;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn stationary_imu(t0: f64, t1: f64, gyro: Vector3<f64>) -> Vec<ImuSample> {
        let n = ((t1 - t0) / 0.005).round() as usize;
        (0..=n)
            .map(|k| ImuSample { t: t0 + k as f64 * 0.005, gyro, accel: Vector3::new(0.0, 0.0, 9.81) })
            .collect()
    }

    fn scan_with_times(times: &[f64], end: f64) -> LidarScan {
        LidarScan {
            end_time: end,
            points: times
                .iter()
                .enumerate()
                .map(|(i, &t)| LidarPoint { position: Vector3::new(3.0 + i as f64, -1.0, 0.5), t })
                .collect(),
        }
    }

    #[test]
    fn zero_motion_only_applies_extrinsics() {
        let ext = Extrinsics { rotation: exp_so3(&Vector3::new(0.1, 0.2, -0.3)), translation: Vector3::new(0.1, 0.0, 0.2) };
        let scan = scan_with_times(&[0.91, 0.95, 0.99, 1.0], 1.0);
        let imu = stationary_imu(0.8, 1.0, Vector3::zeros());
        let out = deskew(&scan, &imu, &State { timestamp: 1.0, ..State::default() }, &ext).unwrap();
        for (p, q) in scan.points.iter().zip(&out) {
            assert_relative_eq!(ext.to_imu(&p.position), *q, epsilon = 1e-12);
        }
    }

    #[test]
    fn points_at_scan_end_are_untouched() {
        let ext = Extrinsics::default();
        let scan = scan_with_times(&[1.0, 1.0, 1.0], 1.0);
        let imu = stationary_imu(0.8, 1.0, Vector3::new(0.3, -0.2, 1.0));
        let x = State { velocity: Vector3::new(1.0, 0.5, 0.0), timestamp: 1.0, ..State::default() };
        let out = deskew(&scan, &imu, &x, &ext).unwrap();
        for (p, q) in scan.points.iter().zip(&out) {
            assert_relative_eq!(ext.to_imu(&p.position), *q, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_rate_rotation() {
        // Rotating at 1 rad/s about z: a point seen 0.05 s before the scan end is
        // expressed at the end through the relative rotation exp(-0.05 ẑ).
        let ext = Extrinsics { rotation: Rotation3::identity(), translation: Vector3::zeros() };
        let scan = scan_with_times(&[0.95], 1.0);
        let imu = stationary_imu(0.8, 1.0, Vector3::new(0.0, 0.0, 1.0));
        let out = deskew(&scan, &imu, &State { timestamp: 1.0, ..State::default() }, &ext).unwrap();
        let expected = exp_so3(&Vector3::new(0.0, 0.0, -0.05)) * scan.points[0].position;
        assert_relative_eq!(out[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn coverage_gap_rejected() {
        let scan = scan_with_times(&[0.9, 1.0], 1.0);
        let mut imu = stationary_imu(0.8, 1.0, Vector3::zeros());
        imu.retain(|s| !(s.t > 0.9 && s.t < 0.97));
        let err = deskew(&scan, &imu, &State::default(), &Extrinsics::default()).unwrap_err();
        assert!(matches!(err, Error::DeskewGap { .. }));
        assert!(deskew(&scan, &[], &State::default(), &Extrinsics::default()).is_err());
    }

    #[test]
    fn map_downsamples_and_answers_queries() {
        let mut map = VoxelMap::new(0.5, 0.25);
        let p = Vector3::new(1.1, 2.2, 0.3);
        map.insert(&vec![p; 1000]);
        assert_eq!(map.len(), 1);
        assert_eq!(map.voxel_points(&p), &[p]);
        let more: Vec<_> = (0..10).map(|i| Vector3::new(i as f64 * 0.3, 2.2, 0.3)).collect();
        map.insert(&more);
        // 1.2 shares a downsampling cell with p and is dropped.
        let near = map.nearest(&Vector3::new(1.2, 2.2, 0.3), 2);
        assert_eq!(near[0], p);
        assert!(map.voxel_points(&p).iter().all(|v| v.x != 1.2));
        assert_eq!(map.len(), 10);
    }

    #[test]
    fn map_insert_is_deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut a = VoxelMap::new(0.5, 0.25);
        let mut b = VoxelMap::new(0.5, 0.25);
        let mut prev = 0;
        for _ in 0..20 {
            let pts: Vec<_> = (0..200)
                .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)))
                .collect();
            a.insert(&pts);
            b.insert(&pts);
            assert!(a.len() >= prev);
            prev = a.len();
        }
        let q = Vector3::new(0.1, 0.2, 1.0);
        assert_eq!(a.nearest(&q, 5), b.nearest(&q, 5));
    }

    fn grid_plane(z: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in -4..=4 {
            for j in -4..=4 {
                pts.push(Vector3::new(i as f64 * 0.25, j as f64 * 0.25, z));
            }
        }
        pts
    }

    #[test]
    fn coplanar_neighbors_give_plane() {
        let cfg = MapConfig::default();
        let mut map = VoxelMap::from_config(&cfg);
        map.insert(&grid_plane(0.0));
        let q = Vector3::new(0.05, -0.02, 0.02);
        let corr = find_correspondence(&map, &q, &cfg).unwrap();
        assert_relative_eq!(corr.normal.abs(), Vector3::z(), epsilon = 1e-12);
        let (h, _, _) = lidar_residual(&State::default(), &corr, &q, 0.02);
        assert_relative_eq!(h.abs(), 0.02, epsilon = 1e-12);
    }

    #[test]
    fn non_planar_neighbors_rejected() {
        let cfg = MapConfig::default();
        let mut map = VoxelMap::from_config(&cfg);
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.3, 0.0, 0.3),
            Vector3::new(0.0, 0.3, -0.3),
            Vector3::new(-0.3, 0.0, 0.3),
            Vector3::new(0.0, -0.3, -0.3),
        ];
        map.insert(&pts);
        assert!(find_correspondence(&map, &Vector3::new(0.0, 0.0, 0.05), &cfg).is_none());
        let mut sparse = VoxelMap::from_config(&cfg);
        sparse.insert(&pts[..3]);
        assert!(find_correspondence(&sparse, &Vector3::zeros(), &cfg).is_none());
    }

    #[test]
    fn far_query_rejected() {
        let cfg = MapConfig::default();
        let mut map = VoxelMap::new(1.0, 0.25);
        map.insert(&grid_plane(0.0));
        assert!(find_correspondence(&map, &Vector3::new(0.0, 0.0, 0.7), &cfg).is_none());
    }

    /// SVD of the centered data matrix; the normal is the right singular vector
    /// of the smallest singular value.
    fn svd_plane(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
        let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let a = DMatrix::from_fn(points.len(), 3, |i, j| points[i][j] - c[j]);
        let svd = a.svd(false, true);
        let vt = svd.v_t.unwrap();
        let (imin, _) = svd.singular_values.argmin();
        (Vector3::new(vt[(imin, 0)], vt[(imin, 1)], vt[(imin, 2)]), c)
    }

    #[test]
    fn plane_fit_matches_svd_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let noise = Normal::new(0.0, 0.01).unwrap();
        for _ in 0..100 {
            let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let u = n.cross(&Vector3::new(0.3, 0.7, 0.1)).normalize();
            let v = n.cross(&u);
            let o = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let pts: Vec<_> = (0..8)
                .map(|_| o + u * rng.random_range(-0.5..0.5) + v * rng.random_range(-0.5..0.5) + n * noise.sample(&mut rng))
                .collect();
            let (fit_n, fit_c) = fit_plane(&pts).unwrap();
            let (svd_n, svd_c) = svd_plane(&pts);
            assert_relative_eq!(fit_c, svd_c, epsilon = 1e-12);
            assert!(fit_n.dot(&svd_n).abs() > 1.0 - 1e-10);
            assert_relative_eq!(fit_n.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn valid_correspondences_pass_planarity_gate() {
        let cfg = MapConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for trial in 0..50 {
            let mut map = VoxelMap::new(0.5, 0.05);
            // Near-planar clouds with an adversarial bump whose height straddles the gate.
            let bump = 0.05 + 0.1 * (trial as f64 / 50.0);
            let pts: Vec<_> = (0..60)
                .map(|i| {
                    let x = rng.random_range(-0.4..0.4);
                    let y = rng.random_range(-0.4..0.4);
                    let z = if i % 7 == 0 { bump } else { rng.random_range(-0.005..0.005) };
                    Vector3::new(x, y, z)
                })
                .collect();
            map.insert(&pts);
            for _ in 0..20 {
                let q = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
                if let Some(c) = find_correspondence(&map, &q, &cfg) {
                    let nn = map.nearest(&q, cfg.neighbors);
                    assert!(nn.iter().all(|p| c.normal.dot(&(p - c.anchor)).abs() <= cfg.plane_gate));
                }
            }
        }
    }

    #[test]
    fn residual_structure_and_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..100 {
            let x = State::random(&mut rng);
            let normal = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let corr = PlaneCorrespondence {
                normal,
                anchor: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)),
                point: Vector3::zeros(),
            };
            let p = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-2.0..2.0));
            let (_, jac, r) = lidar_residual(&x, &corr, &p, 0.02);
            assert_relative_eq!(r, 4e-4);
            let num = numdiff::jacobian(
                |d| {
                    let delta = ErrorVector::from_column_slice(d.as_slice());
                    DVector::from_element(1, lidar_residual(&x.boxplus(&delta), &corr, &p, 0.02).0)
                },
                21,
                numdiff::STEP,
            );
            let ana = DMatrix::from_row_slice(1, 21, jac.transpose().as_slice());
            assert!(numdiff::relative_error(&ana, &num) < 1e-5);

            // Translating along the normal changes h by exactly that distance.
            let d = 0.37;
            let mut moved = x.clone();
            moved.position += normal * d;
            let (h0, _, _) = lidar_residual(&x, &corr, &p, 0.02);
            let (h1, _, _) = lidar_residual(&moved, &corr, &p, 0.02);
            assert_relative_eq!(h1 - h0, d, epsilon = 1e-12);

            // Flipping the normal flips the residual.
            let flipped = PlaneCorrespondence { normal: -normal, ..corr };
            assert_relative_eq!(lidar_residual(&x, &flipped, &p, 0.02).0, -h0, epsilon = 1e-12);
        }
        let x = State::default();
        let corr = PlaneCorrespondence { normal: Vector3::z(), anchor: Vector3::new(3.0, 1.0, 0.0), point: Vector3::zeros() };
        assert_eq!(lidar_residual(&x, &corr, &Vector3::new(-1.0, 2.0, 0.0), 0.02).0, 0.0);
    }
}
