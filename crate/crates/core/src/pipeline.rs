//! Event scheduling and the filter loop tying propagation, contact handling
//! and the iterated update together.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact::{reset_contact, schmitt_update, ContactConfig, ContactState};
use crate::dataset::{Dataset, ExtrinsicsConfig};
use crate::error::{Error, Result};
use crate::iekf::{iterated_update, IekfOptions, MeasurementBlock, MeasurementProvider};
use crate::kin_measurement::kinematic_measurement;
use crate::kinematics::{ChainConfig, KinematicChain};
use crate::lidar::{deskew, find_correspondence, lidar_residual, Extrinsics, MapConfig, VoxelMap};
use crate::propagation::Propagator;
use crate::state::{initial_state, Covariance, ImuSample, JointSample, Leg, NoiseConfig, State, POS, VEL};

/// Which sensor combination drives the updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// LiDAR, IMU and leg kinematics.
    Liko,
    /// IMU and leg kinematics only.
    LikoIk,
    /// LiDAR and IMU only; joint samples still clock the output.
    LikoLi,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Liko, Mode::LikoIk, Mode::LikoLi];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Liko => "liko",
            Mode::LikoIk => "liko_ik",
            Mode::LikoLi => "liko_li",
        }
    }

    pub fn uses_lidar(self) -> bool {
        self != Mode::LikoIk
    }

    pub fn uses_kinematics(self) -> bool {
        self != Mode::LikoLi
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}' (expected liko, liko_ik or liko_li)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IekfConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IekfConfig {
    fn default() -> Self {
        let o = IekfOptions::default();
        Self { max_iterations: o.max_iterations, tolerance: o.tolerance }
    }
}

impl From<IekfConfig> for IekfOptions {
    fn from(c: IekfConfig) -> Self {
        IekfOptions { max_iterations: c.max_iterations, tolerance: c.tolerance }
    }
}

/// Everything the filter needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// IMU time used for static initialization, s.
    pub init_window: f64,
    pub noise: NoiseConfig,
    pub contact: ContactConfig,
    pub map: MapConfig,
    pub iekf: IekfConfig,
    /// Overrides the chains declared by the dataset.
    pub left_leg: Option<ChainConfig>,
    pub right_leg: Option<ChainConfig>,
    /// Overrides the extrinsics declared by the dataset.
    pub extrinsics: Option<ExtrinsicsConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Liko,
            seed: 0,
            init_window: 1.0,
            noise: NoiseConfig::default(),
            contact: ContactConfig::default(),
            map: MapConfig::default(),
            iekf: IekfConfig::default(),
            left_leg: None,
            right_leg: None,
            extrinsics: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.contact.validate()?;
        if !(self.init_window > 0.0) {
            return Err(Error::Config("init_window must be positive".into()));
        }
        if self.iekf.max_iterations == 0 || !(self.iekf.tolerance > 0.0) {
            return Err(Error::Config("iekf needs max_iterations >= 1 and a positive tolerance".into()));
        }
        let m = &self.map;
        if !(m.resolution > 0.0 && m.downsample > 0.0 && m.plane_gate > 0.0 && m.association_gate > 0.0) || m.neighbors < 3 {
            return Err(Error::Config("map parameters must be positive with at least 3 neighbors".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    Imu(usize),
    Force(usize),
    /// Joint samples sharing one timestamp; `update` is false when the mode
    /// only uses them to clock the output.
    Joint { left: Option<usize>, right: Option<usize>, update: bool },
    Lidar(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

impl EventKind {
    fn priority(&self) -> u8 {
        match self {
            EventKind::Imu(_) => 0,
            EventKind::Force(_) => 1,
            EventKind::Joint { .. } => 2,
            EventKind::Lidar(_) => 3,
        }
    }
}

fn check_order(stream: &str, times: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for t in times {
        if !(t > prev) {
            return Err(Error::OutOfOrder { stream: stream.to_string(), prev, next: t });
        }
        prev = t;
    }
    Ok(())
}

/// Merges all streams by time. Ties run IMU, force, joint, LiDAR.
pub fn schedule(ds: &Dataset, mode: Mode) -> Result<Vec<Event>> {
    check_order("imu", ds.imu.iter().map(|s| s.t))?;
    check_order("forces", ds.forces.iter().map(|s| s.t))?;
    check_order("joints_left", ds.joints[0].iter().map(|s| s.t))?;
    check_order("joints_right", ds.joints[1].iter().map(|s| s.t))?;
    check_order("scans", ds.scans.iter().map(|s| s.end_time))?;

    let mut events = Vec::with_capacity(ds.imu.len() + ds.forces.len() + ds.joints[0].len() + ds.scans.len());
    events.extend(ds.imu.iter().enumerate().map(|(i, s)| Event { t: s.t, kind: EventKind::Imu(i) }));
    events.extend(ds.forces.iter().enumerate().map(|(i, s)| Event { t: s.t, kind: EventKind::Force(i) }));

    let update = mode.uses_kinematics();
    let (l, r) = (&ds.joints[0], &ds.joints[1]);
    let (mut i, mut j) = (0, 0);
    while i < l.len() || j < r.len() {
        let tl = l.get(i).map_or(f64::INFINITY, |s| s.t);
        let tr = r.get(j).map_or(f64::INFINITY, |s| s.t);
        let (left, right, t) = if tl == tr {
            i += 1;
            j += 1;
            (Some(i - 1), Some(j - 1), tl)
        } else if tl < tr {
            i += 1;
            (Some(i - 1), None, tl)
        } else {
            j += 1;
            (None, Some(j - 1), tr)
        };
        events.push(Event { t, kind: EventKind::Joint { left, right, update } });
    }
    if mode.uses_lidar() {
        events.extend(ds.scans.iter().enumerate().map(|(i, s)| Event { t: s.end_time, kind: EventKind::Lidar(i) }));
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.kind.priority().cmp(&b.kind.priority())));
    Ok(events)
}

/// Filter output at one joint timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSample {
    pub t: f64,
    pub rotation: Rotation3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub contact: Vector3<f64>,
    pub stance: Option<Leg>,
    /// Covariance of `[δp, δv]`.
    pub pos_vel_covariance: SMatrix<f64, 6, 6>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mode: String,
    pub events: usize,
    pub propagation_steps: usize,
    pub propagation_gap_warnings: usize,
    pub kinematic_updates: usize,
    pub lidar_updates: usize,
    pub stacked_updates: usize,
    pub contact_resets: usize,
    pub scans_used_for_map_init: usize,
    pub skipped_scans_deskew: usize,
    pub skipped_scans_no_correspondence: usize,
    pub non_converged_updates: usize,
    /// Number of updates that used each iteration count, keyed by count.
    pub iteration_histogram: BTreeMap<String, usize>,
    pub mean_lidar_rows: f64,
    pub map_points: usize,
    pub output_samples: usize,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub samples: Vec<OutputSample>,
    pub stats: RunStats,
    pub final_state: State,
    pub final_covariance: Covariance,
}

/// Resolved chains and extrinsics for a run.
pub fn resolve_geometry(ds: &Dataset, cfg: &RunConfig) -> Result<([KinematicChain; 2], Extrinsics)> {
    let left = KinematicChain::from_config(cfg.left_leg.as_ref().unwrap_or(&ds.meta.left_leg))?;
    let right = KinematicChain::from_config(cfg.right_leg.as_ref().unwrap_or(&ds.meta.right_leg))?;
    let ext = cfg.extrinsics.as_ref().unwrap_or(&ds.meta.extrinsics).to_extrinsics();
    for (chain, stream) in [(&left, &ds.joints[0]), (&right, &ds.joints[1])] {
        if let Some(s) = stream.first() {
            if s.q.len() != chain.dof() {
                return Err(Error::Dataset(format!(
                    "{} leg chain has {} joints but the joint stream has {}",
                    s.leg.name(),
                    chain.dof(),
                    s.q.len()
                )));
            }
        }
    }
    Ok(([left, right], ext))
}


/// IMU history kept for deskewing, s.
const IMU_HISTORY: f64 = 1.0;

struct KinProvider<'a> {
    gyro: Vector3<f64>,
    joint: &'a JointSample,
    chain: &'a KinematicChain,
    noise: &'a NoiseConfig,
}

impl MeasurementProvider for KinProvider<'_> {
    fn linearize(&mut self, x: &State) -> Result<Vec<MeasurementBlock>> {
        let m = kinematic_measurement(x, &self.gyro, self.joint, self.chain, self.noise);
        Ok([m.velocity, m.position]
            .into_iter()
            .map(|r| {
                MeasurementBlock::new(
                    DVector::from_column_slice(r.residual.as_slice()),
                    DMatrix::from_column_slice(3, 21, r.jacobian.as_slice()),
                    DMatrix::from_column_slice(3, 3, r.covariance.as_slice()),
                )
            })
            .collect())
    }
}

/// Point-to-plane rows, re-associated against the map at every linearization.
struct LidarProvider<'a> {
    points: &'a [Vector3<f64>],
    map: &'a VoxelMap,
    cfg: &'a MapConfig,
    sigma: f64,
    rows: usize,
}

impl MeasurementProvider for LidarProvider<'_> {
    fn linearize(&mut self, x: &State) -> Result<Vec<MeasurementBlock>> {
        let mut z = Vec::new();
        let mut h = Vec::new();
        for p in self.points {
            let world = x.rotation * p + x.position;
            if let Some(corr) = find_correspondence(self.map, &world, self.cfg) {
                let (r, jac, _) = lidar_residual(x, &corr, p, self.sigma);
                z.push(r);
                h.extend_from_slice(jac.as_slice());
            }
        }
        self.rows = z.len();
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let n = z.len();
        Ok(vec![MeasurementBlock::diagonal(
            DVector::from_vec(z),
            DMatrix::from_row_slice(n, 21, &h),
            DVector::from_element(n, self.sigma * self.sigma),
        )])
    }
}

struct Filter<'a> {
    ds: &'a Dataset,
    cfg: &'a RunConfig,
    chains: [KinematicChain; 2],
    ext: Extrinsics,
    opts: IekfOptions,
    x: State,
    p: Covariance,
    prop: Propagator,
    contact: ContactState,
    pending_reset: bool,
    last_joint: [Option<&'a JointSample>; 2],
    imu_history: VecDeque<ImuSample>,
    map: VoxelMap,
    stats: RunStats,
    lidar_rows: usize,
}

impl<'a> Filter<'a> {
    fn stance_joint(&self) -> Option<(Leg, &'a JointSample)> {
        let leg = self.contact.stance?;
        self.last_joint[leg.index()].map(|j| (leg, j))
    }

    fn advance(&mut self, t: f64) {
        let frame = match self.stance_joint() {
            Some((leg, j)) => *self.chains[leg.index()].fko(&j.q).matrix(),
            None => Matrix3::identity(),
        };
        self.prop.advance(&mut self.x, &mut self.p, t, &frame, &self.cfg.noise);
    }

    fn on_imu(&mut self, t: f64, sample: ImuSample) {
        self.advance(t);
        self.prop.set_imu(sample);
        self.imu_history.push_back(sample);
        while self.imu_history.front().is_some_and(|s| s.t < t - IMU_HISTORY) {
            self.imu_history.pop_front();
        }
    }

    fn on_force(&mut self, index: usize) {
        let next = schmitt_update(&self.contact, &self.ds.forces[index], &self.cfg.contact);
        if next.stance.is_some() && next.stance != self.contact.stance {
            self.pending_reset = true;
        }
        self.contact = next;
    }

    fn reset_if_pending(&mut self) {
        if !self.pending_reset {
            return;
        }
        if let Some((leg, j)) = self.stance_joint() {
            let (x, p) = reset_contact(&self.x, &self.p, &self.chains[leg.index()], &j.q, &self.cfg.noise);
            self.x = x;
            self.p = p;
            self.pending_reset = false;
            self.stats.contact_resets += 1;
        }
    }

    /// Deskewed scan in the current IMU frame, or `None` when it is rejected.
    fn deskewed(&mut self, index: usize) -> Option<Vec<Vector3<f64>>> {
        let imu: Vec<ImuSample> = self.imu_history.iter().copied().collect();
        match deskew(&self.ds.scans[index], &imu, &self.x, &self.ext) {
            Ok(points) => {
                let stride = match self.cfg.map.max_points_per_scan {
                    0 => 1,
                    m => points.len().div_ceil(m).max(1),
                };
                Some(points.into_iter().step_by(stride).collect())
            }
            Err(e) => {
                warn!("skipping scan {index}: {e}");
                self.stats.skipped_scans_deskew += 1;
                None
            }
        }
    }

    fn insert_scan(&mut self, points: &[Vector3<f64>]) {
        let world: Vec<_> = points.iter().map(|p| self.x.rotation * p + self.x.position).collect();
        self.map.insert(&world);
    }

    /// One update stacking kinematic rows (when `kin`) and LiDAR rows (when a
    /// scan is given) at time `t`.
    fn update(&mut self, t: f64, kin: bool, scan: Option<usize>) -> Result<()> {
        let mut points = scan.and_then(|i| self.deskewed(i));
        if self.map.is_empty() {
            if let Some(pts) = points.take() {
                self.insert_scan(&pts);
                self.stats.scans_used_for_map_init += 1;
            }
        }
        let kin_joint = if kin { self.stance_joint() } else { None };
        if kin_joint.is_none() && points.is_none() {
            return Ok(());
        }

        let cfg = self.cfg;
        let gyro = self.prop.held().map_or_else(Vector3::zeros, |u| u.gyro);
        let (result, lidar_rows) = {
            let mut kin_provider = kin_joint.map(|(leg, joint)| KinProvider {
                gyro,
                joint,
                chain: &self.chains[leg.index()],
                noise: &cfg.noise,
            });
            let mut lidar_provider = points.as_deref().map(|pts| LidarProvider {
                points: pts,
                map: &self.map,
                cfg: &cfg.map,
                sigma: cfg.noise.lidar_point,
                rows: 0,
            });
            let mut providers: Vec<&mut dyn MeasurementProvider> = Vec::with_capacity(2);
            if let Some(k) = kin_provider.as_mut() {
                providers.push(k);
            }
            if let Some(l) = lidar_provider.as_mut() {
                providers.push(l);
            }
            let result = iterated_update(&self.x, &self.p, &mut providers, &self.opts);
            drop(providers);
            (result, lidar_provider.map_or(0, |l| l.rows))
        };

        match result {
            Ok(out) => {
                self.x = out.state;
                self.x.timestamp = t;
                self.p = out.covariance;
                *self.stats.iteration_histogram.entry(out.iterations.to_string()).or_default() += 1;
                if !out.converged {
                    self.stats.non_converged_updates += 1;
                }
                if kin_joint.is_some() {
                    self.stats.kinematic_updates += 1;
                }
                if points.is_some() {
                    if lidar_rows > 0 {
                        self.stats.lidar_updates += 1;
                        self.lidar_rows += lidar_rows;
                        if kin_joint.is_some() {
                            self.stats.stacked_updates += 1;
                        }
                    } else {
                        self.stats.skipped_scans_no_correspondence += 1;
                    }
                }
            }
            Err(Error::NoMeasurements) => {
                debug!("no valid measurement rows at t={t:.6}");
                if points.is_some() {
                    self.stats.skipped_scans_no_correspondence += 1;
                }
            }
            Err(e) => return Err(Error::filter(t, e)),
        }
        if let Some(pts) = &points {
            self.insert_scan(pts);
        }
        Ok(())
    }

    fn output(&self, t: f64) -> OutputSample {
        let mut cov = SMatrix::<f64, 6, 6>::zeros();
        for (i, a) in [POS, VEL].into_iter().enumerate() {
            for (j, b) in [POS, VEL].into_iter().enumerate() {
                cov.fixed_view_mut::<3, 3>(3 * i, 3 * j).copy_from(&self.p.fixed_view::<3, 3>(a, b));
            }
        }
        OutputSample {
            t,
            rotation: self.x.rotation,
            position: self.x.position,
            velocity: self.x.velocity,
            contact: self.x.contact,
            stance: self.contact.stance,
            pos_vel_covariance: cov,
        }
    }
}

/// Runs the filter over a dataset, emitting one sample per joint timestamp.
pub fn run_filter(ds: &Dataset, cfg: &RunConfig) -> Result<FilterOutput> {
    cfg.validate()?;
    if cfg.mode.uses_lidar() && ds.scans.is_empty() {
        return Err(Error::Dataset(format!("LiDAR required for mode {}", cfg.mode)));
    }
    let (chains, ext) = resolve_geometry(ds, cfg)?;
    let events = schedule(ds, cfg.mode)?;

    let t0 = ds.imu.first().map_or(0.0, |s| s.t);
    let window: Vec<ImuSample> = ds.imu.iter().take_while(|s| s.t <= t0 + cfg.init_window).copied().collect();
    let (x, p) = initial_state(&window, &cfg.noise)?;

    let mut f = Filter {
        ds,
        cfg,
        chains,
        ext,
        opts: cfg.iekf.into(),
        x,
        p,
        prop: Propagator::new(),
        contact: ContactState::default(),
        pending_reset: false,
        last_joint: [None, None],
        imu_history: VecDeque::new(),
        map: VoxelMap::from_config(&cfg.map),
        stats: RunStats { mode: cfg.mode.to_string(), events: events.len(), ..RunStats::default() },
        lidar_rows: 0,
    };
    let mut samples = Vec::with_capacity(ds.joints[0].len().max(ds.joints[1].len()));
    let mut stacked_scan = None;

    for (k, ev) in events.iter().enumerate() {
        let t = ev.t;
        match ev.kind {
            EventKind::Imu(i) => f.on_imu(t, ds.imu[i]),
            EventKind::Force(i) => f.on_force(i),
            EventKind::Joint { left, right, update } => {
                f.advance(t);
                for (slot, index) in [left, right].into_iter().enumerate() {
                    if let Some(i) = index {
                        f.last_joint[slot] = Some(&ds.joints[slot][i]);
                    }
                }
                f.reset_if_pending();
                stacked_scan = match events.get(k + 1) {
                    Some(Event { t: tn, kind: EventKind::Lidar(s) }) if *tn == t => Some(*s),
                    _ => None,
                };
                f.update(t, update, stacked_scan)?;
                samples.push(f.output(t));
            }
            EventKind::Lidar(i) => {
                if stacked_scan.take() == Some(i) {
                    continue;
                }
                f.advance(t);
                f.update(t, false, Some(i))?;
            }
        }
    }

    let mut stats = f.stats;
    stats.propagation_steps = f.prop.steps;
    stats.propagation_gap_warnings = f.prop.gap_warnings;
    stats.mean_lidar_rows = if stats.lidar_updates > 0 { f.lidar_rows as f64 / stats.lidar_updates as f64 } else { 0.0 };
    stats.map_points = f.map.len();
    stats.output_samples = samples.len();
    Ok(FilterOutput { samples, stats, final_state: f.x, final_covariance: f.p })
}
