//! Synthetic biped: gait generation and every sensor stream against a room
//! made of bounded planes.
//!
//! The base follows reference poses with a quintic blend per stage. Each stage
//! moves the left foot and then the right foot to the next reference pose, so
//! footsteps alternate and both feet stand side by side at every keyframe.
//!
//! Random streams use one ChaCha8 generator per stream, all seeded with the
//! gait seed and separated by stream number: 0 IMU, 1 joints, 2 forces, 3 LiDAR.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::KinematicChain;
use crate::lidar::{Extrinsics, LidarPoint, LidarScan};
use crate::state::{ForceSample, ImuSample, JointSample, Leg, NoiseConfig, STANDARD_GRAVITY};

const STAND_TIME: f64 = 1.0;
const STANCE_HALF_WIDTH: f64 = 0.1;
const SWING_HEIGHT: f64 = 0.05;
const BOB_AMPLITUDE: f64 = 0.01;
const SQUARE_SIDE: f64 = 3.0;
const CORNER_STAGES: usize = 3;
const IN_PLACE_TURN: f64 = PI / 2.0;
const FORWARD_BACKWARD_MAX_TRAVEL: f64 = 4.0;
const UP_SLOPE_MAX_TRAVEL: f64 = 5.0;
const SLOPE_START_X: f64 = 0.0;
const SLOPE_DEG: f64 = 10.0;
const MAX_STEP_LENGTH: f64 = 0.45;
const ROOM_MIN: f64 = -3.0;
const ROOM_MAX: f64 = 6.0;
const WALL_HEIGHT: f64 = 3.0;
const LIDAR_MIN_RANGE: f64 = 0.5;
const LIDAR_MAX_RANGE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaitPattern {
    Stand,
    ForwardBackward,
    SquareWalk,
    WalkInPlaceTurn,
    UpSlope,
}

impl GaitPattern {
    pub const ALL: [GaitPattern; 5] = [
        GaitPattern::Stand,
        GaitPattern::ForwardBackward,
        GaitPattern::SquareWalk,
        GaitPattern::WalkInPlaceTurn,
        GaitPattern::UpSlope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GaitPattern::Stand => "stand",
            GaitPattern::ForwardBackward => "forward_backward",
            GaitPattern::SquareWalk => "square_walk",
            GaitPattern::WalkInPlaceTurn => "walk_in_place_turn",
            GaitPattern::UpSlope => "up_slope",
        }
    }
}

impl fmt::Display for GaitPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GaitPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GaitPattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gait pattern '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitParams {
    pub pattern: GaitPattern,
    /// Forward advance per stage, m.
    pub step_length: f64,
    /// Nominal duration of one footstep, s. Rounded so that a whole number of
    /// stages fills the walking time.
    pub step_duration: f64,
    /// Fraction of each footstep spent in double support.
    pub double_support_ratio: f64,
    /// IMU height above the terrain under the feet, m.
    pub base_height: f64,
    pub duration: f64,
    pub seed: u64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            pattern: GaitPattern::SquareWalk,
            step_length: 0.3,
            step_duration: 0.6,
            double_support_ratio: 0.2,
            base_height: 0.75,
            duration: 60.0,
            seed: 0,
        }
    }
}

impl GaitParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleGait(m));
        if !(self.duration > 2.0 * STAND_TIME) {
            return bad(format!("duration {} s must exceed {} s of standing", self.duration, 2.0 * STAND_TIME));
        }
        if !(self.step_duration > 0.0) {
            return bad("step_duration must be positive".into());
        }
        if !(0.0..1.0).contains(&self.double_support_ratio) {
            return bad(format!("double_support_ratio {} outside [0, 1)", self.double_support_ratio));
        }
        if !(self.step_length > 0.0 && self.step_length <= MAX_STEP_LENGTH) {
            return bad(format!("step length {} m outside (0, {MAX_STEP_LENGTH}] for the leg geometry", self.step_length));
        }
        if !(self.base_height > 0.3 && self.base_height < 0.85) {
            return bad(format!("base height {} m unreachable by the legs", self.base_height));
        }
        Ok(())
    }

    fn walking_time(&self) -> f64 {
        self.duration - 2.0 * STAND_TIME
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pose2 {
    xy: [f64; 2],
    z: f64,
    yaw: f64,
}

/// World-frame kinematics of the base at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseSample {
    pub rotation: Rotation3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Angular rate in the body frame, rad/s.
    pub angular_velocity: Vector3<f64>,
}

/// Anything that can report base kinematics at arbitrary times.
pub trait BaseMotion {
    fn base(&self, t: f64) -> BaseSample;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footstep {
    pub leg: Leg,
    pub position: Vector3<f64>,
    pub touchdown: f64,
    pub liftoff: f64,
}

#[derive(Debug, Clone, Copy)]
struct Swing {
    leg: Leg,
    liftoff: f64,
    touchdown: f64,
    from: Vector3<f64>,
    to: Vector3<f64>,
}

/// Quintic smoothstep and its first two derivatives.
fn smootherstep(tau: f64) -> (f64, f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    (
        t * t * t * (t * (6.0 * t - 15.0) + 10.0),
        30.0 * t * t * (t - 1.0) * (t - 1.0),
        60.0 * t * (2.0 * t - 1.0) * (t - 1.0),
    )
}

/// Terrain height under `(x, y)`.
fn terrain(pattern: GaitPattern, x: f64) -> f64 {
    if pattern == GaitPattern::UpSlope && x > SLOPE_START_X {
        (x - SLOPE_START_X) * SLOPE_DEG.to_radians().tan()
    } else {
        0.0
    }
}

/// Deterministic gait: reference keyframes, footstep timing and force shares.
#[derive(Debug, Clone)]
pub struct Gait {
    pub params: GaitParams,
    keys: Vec<Pose2>,
    stage_duration: f64,
    swings: Vec<Swing>,
    force_knots: [Vec<(f64, f64)>; 2],
    pub body_weight: f64,
}

impl Gait {
    pub fn new(params: &GaitParams) -> Result<Self> {
        params.validate()?;
        let p = params.pattern;
        let walk = params.walking_time();
        let nominal_stage = 2.0 * params.step_duration;
        let pose = |x: f64, y: f64, yaw: f64| Pose2 { xy: [x, y], z: terrain(p, x), yaw };
        let mut keys = Vec::new();
        match p {
            GaitPattern::Stand => keys.push(pose(0.0, 0.0, 0.0)),
            GaitPattern::SquareWalk => {
                let per_side = (SQUARE_SIDE / params.step_length).round().max(1.0) as usize;
                let step = SQUARE_SIDE / per_side as f64;
                let mut cur = pose(0.0, 0.0, 0.0);
                keys.push(cur);
                for side in 0..4 {
                    let yaw = side as f64 * PI / 2.0;
                    for _ in 0..per_side {
                        cur = pose(cur.xy[0] + step * yaw.cos(), cur.xy[1] + step * yaw.sin(), yaw);
                        keys.push(cur);
                    }
                    for c in 1..=CORNER_STAGES {
                        let turn = yaw + c as f64 * (PI / 2.0) / CORNER_STAGES as f64;
                        keys.push(pose(cur.xy[0], cur.xy[1], turn));
                    }
                }
                // Close the loop exactly.
                let last = keys.len() - 1;
                keys[last].xy = [0.0, 0.0];
            }
            GaitPattern::WalkInPlaceTurn => {
                let n = (walk / nominal_stage).round().max(1.0) as usize;
                for k in 0..=n {
                    keys.push(pose(0.0, 0.0, IN_PLACE_TURN * k as f64 / n as f64));
                }
            }
            GaitPattern::ForwardBackward => {
                let half = (walk / (2.0 * nominal_stage)).round().max(1.0) as usize;
                let step = params.step_length.min(FORWARD_BACKWARD_MAX_TRAVEL / half as f64);
                let x0 = -1.0;
                for k in 0..=half {
                    keys.push(pose(x0 + step * k as f64, 0.0, 0.0));
                }
                for k in (0..half).rev() {
                    keys.push(pose(x0 + step * k as f64, 0.0, 0.0));
                }
            }
            GaitPattern::UpSlope => {
                let n = (walk / nominal_stage).round().max(1.0) as usize;
                let step = params.step_length.min(UP_SLOPE_MAX_TRAVEL / n as f64);
                let x0 = -2.0;
                for k in 0..=n {
                    keys.push(pose(x0 + step * k as f64, 0.0, 0.0));
                }
            }
        }
        let stages = keys.len() - 1;
        let stage_duration = if stages == 0 { walk } else { walk / stages as f64 };

        let mut gait = Gait {
            params: params.clone(),
            keys,
            stage_duration,
            swings: Vec::new(),
            force_knots: [Vec::new(), Vec::new()],
            body_weight: 600.0,
        };
        gait.build_schedule();
        Ok(gait)
    }

    pub fn duration(&self) -> f64 {
        self.params.duration
    }

    fn stages(&self) -> usize {
        self.keys.len() - 1
    }

    fn step_duration(&self) -> f64 {
        self.stage_duration / 2.0
    }

    fn walk_end(&self) -> f64 {
        STAND_TIME + self.stages() as f64 * self.stage_duration
    }

    fn foot_at_key(&self, key: &Pose2, leg: Leg) -> Vector3<f64> {
        let side = if leg == Leg::Left { STANCE_HALF_WIDTH } else { -STANCE_HALF_WIDTH };
        let x = key.xy[0] - side * key.yaw.sin();
        let y = key.xy[1] + side * key.yaw.cos();
        Vector3::new(x, y, terrain(self.params.pattern, x))
    }

    fn build_schedule(&mut self) {
        let w = self.body_weight;
        let sd = self.step_duration();
        let ds = self.params.double_support_ratio * sd;
        let mut knots: [Vec<(f64, f64)>; 2] = [vec![(0.0, 0.6 * w)], vec![(0.0, 0.4 * w)]];
        let mut current = [0.6 * w, 0.4 * w];
        for k in 0..self.stages() {
            let t_stage = STAND_TIME + k as f64 * self.stage_duration;
            for (j, leg) in Leg::BOTH.into_iter().enumerate() {
                let ts = t_stage + j as f64 * sd;
                let a = leg.index();
                let b = leg.other().index();
                knots[a].push((ts, current[a]));
                knots[b].push((ts, current[b]));
                knots[a].push((ts + ds, 0.0));
                knots[b].push((ts + ds, w));
                knots[a].push((ts + sd, 0.0));
                current = [0.0; 2];
                current[b] = w;
                self.swings.push(Swing {
                    leg,
                    liftoff: ts + ds,
                    touchdown: ts + sd,
                    from: self.foot_at_key(&self.keys[k], leg),
                    to: self.foot_at_key(&self.keys[k + 1], leg),
                });
            }
        }
        if self.stages() > 0 {
            let te = self.walk_end();
            let ramp = ds.max(0.1);
            for i in 0..2 {
                knots[i].push((te, current[i]));
            }
            knots[0].push((te + ramp, 0.6 * w));
            knots[1].push((te + ramp, 0.4 * w));
        }
        self.force_knots = knots;
    }

    /// Ideal normal force on a foot, N.
    pub fn force(&self, leg: Leg, t: f64) -> f64 {
        let k = &self.force_knots[leg.index()];
        let i = k.partition_point(|&(tk, _)| tk <= t);
        if i == 0 {
            return k[0].1;
        }
        let (t0, f0) = k[i - 1];
        match k.get(i) {
            Some(&(t1, f1)) if t1 > t0 => f0 + (f1 - f0) * (t - t0) / (t1 - t0),
            _ => f0,
        }
    }

    /// Whether the foot is on the ground (outside its swing phases).
    pub fn in_contact(&self, leg: Leg, t: f64) -> bool {
        !self.swings.iter().any(|s| s.leg == leg && t > s.liftoff && t < s.touchdown)
    }

    /// Foot position and velocity in the world frame.
    pub fn foot(&self, leg: Leg, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let mut pos = self.foot_at_key(&self.keys[0], leg);
        for s in self.swings.iter().filter(|s| s.leg == leg) {
            if t <= s.liftoff {
                break;
            }
            if t >= s.touchdown {
                pos = s.to;
                continue;
            }
            let span = s.touchdown - s.liftoff;
            let tau = (t - s.liftoff) / span;
            let (sv, sd, _) = smootherstep(tau);
            let d = s.to - s.from;
            let lift = SWING_HEIGHT * (PI * tau).sin().powi(2);
            let dlift = SWING_HEIGHT * PI * (2.0 * PI * tau).sin() / span;
            let p = s.from + d * sv + Vector3::z() * lift;
            let v = d * (sd / span) + Vector3::z() * dlift;
            return (p, v);
        }
        (pos, Vector3::zeros())
    }

    /// Footholds with their touchdown and liftoff times.
    pub fn footsteps(&self) -> Vec<Footstep> {
        let mut out = Vec::new();
        for leg in Leg::BOTH {
            let mut touchdown = 0.0;
            let mut position = self.foot_at_key(&self.keys[0], leg);
            for s in self.swings.iter().filter(|s| s.leg == leg) {
                out.push(Footstep { leg, position, touchdown, liftoff: s.liftoff });
                touchdown = s.touchdown;
                position = s.to;
            }
            out.push(Footstep { leg, position, touchdown, liftoff: self.duration() });
        }
        out.sort_by(|a, b| a.touchdown.total_cmp(&b.touchdown).then(a.leg.index().cmp(&b.leg.index())));
        out
    }

    fn bob(&self, t: f64) -> (f64, f64, f64) {
        if self.stages() == 0 || t <= STAND_TIME || t >= self.walk_end() {
            return (0.0, 0.0, 0.0);
        }
        let sd = self.step_duration();
        let tau = ((t - STAND_TIME) / sd).fract();
        let (s, c) = (PI * tau).sin_cos();
        let a = BOB_AMPLITUDE;
        (
            -a * s.powi(4),
            -a * 4.0 * PI * s.powi(3) * c / sd,
            -a * PI * PI * (12.0 * s * s * c * c - 4.0 * s.powi(4)) / (sd * sd),
        )
    }
}

impl BaseMotion for Gait {
    fn base(&self, t: f64) -> BaseSample {
        let n = self.stages();
        let (a, b, tau) = if n == 0 || t <= STAND_TIME {
            (self.keys[0], self.keys[0], 0.0)
        } else if t >= self.walk_end() {
            (self.keys[n], self.keys[n], 0.0)
        } else {
            let k = (((t - STAND_TIME) / self.stage_duration).floor() as usize).min(n - 1);
            let t0 = STAND_TIME + k as f64 * self.stage_duration;
            (self.keys[k], self.keys[k + 1], (t - t0) / self.stage_duration)
        };
        let (s, ds, dds) = smootherstep(tau);
        let ts = self.stage_duration;
        let dp = Vector3::new(b.xy[0] - a.xy[0], b.xy[1] - a.xy[1], b.z - a.z);
        let (bz, dbz, ddbz) = self.bob(t);
        let position = Vector3::new(a.xy[0], a.xy[1], a.z + self.params.base_height) + dp * s + Vector3::z() * bz;
        let velocity = dp * (ds / ts) + Vector3::z() * dbz;
        let acceleration = dp * (dds / (ts * ts)) + Vector3::z() * ddbz;
        let yaw = a.yaw + (b.yaw - a.yaw) * s;
        let yaw_rate = (b.yaw - a.yaw) * ds / ts;
        BaseSample {
            rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), yaw),
            position,
            velocity,
            acceleration,
            angular_velocity: Vector3::new(0.0, 0.0, yaw_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthSample {
    pub t: f64,
    pub rotation: Rotation3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub samples: Vec<GroundTruthSample>,
    pub footsteps: Vec<Footstep>,
}

/// Timestamps `k / rate` for every `k` with `k / rate < duration`, built on
/// an integer nanosecond grid.
pub fn time_grid(duration: f64, rate: f64) -> Vec<f64> {
    let period_ns = (1e9 / rate).round() as u64;
    let end_ns = (duration * 1e9).round() as u64;
    (0..).map(|k| k * period_ns).take_while(|&ns| ns < end_ns).map(|ns| ns as f64 / 1e9).collect()
}

pub fn generate_gait(params: &GaitParams, rate: f64) -> Result<(Gait, GroundTruth)> {
    let gait = Gait::new(params)?;
    let samples = time_grid(params.duration, rate)
        .into_iter()
        .map(|t| {
            let b = gait.base(t);
            GroundTruthSample { t, rotation: b.rotation, position: b.position, velocity: b.velocity }
        })
        .collect();
    let footsteps = gait.footsteps();
    Ok((gait, GroundTruth { samples, footsteps }))
}

/// A bounded rectangle `anchor + a·u + b·v`, `a ∈ [0, extent_u]`, `b ∈ [0, extent_v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub anchor: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub extent_u: f64,
    pub extent_v: f64,
}

impl Plane {
    fn new(anchor: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, extent_u: f64, extent_v: f64) -> Self {
        Self { normal: u.cross(&v).normalize(), anchor, u, v, extent_u, extent_v }
    }

    pub fn area(&self) -> f64 {
        self.extent_u * self.extent_v
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.anchor))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub planes: Vec<Plane>,
}

impl WorldModel {
    /// Floor and four 3 m walls around `[-3, 6]²`, with a 10° ramp for
    /// [`GaitPattern::UpSlope`].
    pub fn room(pattern: GaitPattern) -> Self {
        let (lo, hi) = (ROOM_MIN, ROOM_MAX);
        let span = hi - lo;
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        let mut planes = Vec::new();
        let floor_end = if pattern == GaitPattern::UpSlope { SLOPE_START_X } else { hi };
        planes.push(Plane::new(Vector3::new(lo, lo, 0.0), x, y, floor_end - lo, span));
        if pattern == GaitPattern::UpSlope {
            let theta = SLOPE_DEG.to_radians();
            let dir = Vector3::new(theta.cos(), 0.0, theta.sin());
            planes.push(Plane::new(Vector3::new(SLOPE_START_X, lo, 0.0), dir, y, (hi - SLOPE_START_X) / theta.cos(), span));
        }
        planes.push(Plane::new(Vector3::new(lo, lo, 0.0), z, y, WALL_HEIGHT, span));
        planes.push(Plane::new(Vector3::new(hi, lo, 0.0), y, z, span, WALL_HEIGHT));
        planes.push(Plane::new(Vector3::new(lo, lo, 0.0), x, z, span, WALL_HEIGHT));
        planes.push(Plane::new(Vector3::new(lo, hi, 0.0), z, x, WALL_HEIGHT, span));
        Self { planes }
    }

    /// Distance from `p` to the nearest plane (unbounded planes).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.planes.iter().map(|pl| pl.distance(p).abs()).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub imu_rate: f64,
    pub joint_rate: f64,
    pub lidar_rate: f64,
    pub points_per_scan: usize,
    /// Standard deviation of the initial gyro bias, rad/s.
    pub initial_gyro_bias: f64,
    /// Standard deviation of the initial accelerometer bias, m/s².
    pub initial_accel_bias: f64,
    pub force_noise: f64,
    /// Disables every noise source and bias.
    pub noiseless: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            imu_rate: 200.0,
            joint_rate: 1000.0,
            lidar_rate: 10.0,
            points_per_scan: 400,
            initial_gyro_bias: 0.2f64.to_radians(),
            initial_accel_bias: 5e-3 * STANDARD_GRAVITY,
            force_noise: 10.0,
            noiseless: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.imu_rate > 0.0 && self.imu_rate <= 1000.0) {
            return Err(Error::Config(format!("imu_rate {} outside (0, 1000] Hz", self.imu_rate)));
        }
        if !(self.joint_rate > 0.0 && self.lidar_rate > 0.0) {
            return Err(Error::Config("sensor rates must be positive".into()));
        }
        if self.points_per_scan == 0 {
            return Err(Error::Config("points_per_scan must be positive".into()));
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian3<R: Rng>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| {
        let n: f64 = StandardNormal.sample(rng);
        n * sigma
    })
}

/// IMU samples with their true biases.
#[derive(Debug, Clone)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub gyro_bias: Vec<Vector3<f64>>,
    pub accel_bias: Vec<Vector3<f64>>,
}

pub fn synthesize_imu(
    motion: &dyn BaseMotion,
    duration: f64,
    noise: &NoiseConfig,
    sim: &SimConfig,
    seed: u64,
) -> ImuStream {
    let mut rng = rng_for(seed, 0);
    let dt = 1.0 / sim.imu_rate;
    let gravity = Vector3::new(0.0, 0.0, -STANDARD_GRAVITY);
    let on = if sim.noiseless { 0.0 } else { 1.0 };
    let mut bg = gaussian3(&mut rng, sim.initial_gyro_bias * on);
    let mut ba = gaussian3(&mut rng, sim.initial_accel_bias * on);
    let times = time_grid(duration, sim.imu_rate);
    let mut out = ImuStream {
        samples: Vec::with_capacity(times.len()),
        gyro_bias: Vec::with_capacity(times.len()),
        accel_bias: Vec::with_capacity(times.len()),
    };
    for t in times {
        let b = motion.base(t);
        let gyro = b.angular_velocity + bg + gaussian3(&mut rng, on * noise.gyro_noise / dt.sqrt());
        let accel = b.rotation.inverse() * (b.acceleration - gravity) + ba + gaussian3(&mut rng, on * noise.accel_noise / dt.sqrt());
        out.samples.push(ImuSample { t, gyro, accel });
        out.gyro_bias.push(bg);
        out.accel_bias.push(ba);
        bg += gaussian3(&mut rng, on * noise.gyro_bias_walk * dt.sqrt());
        ba += gaussian3(&mut rng, on * noise.accel_bias_walk * dt.sqrt());
    }
    out
}

/// Leg chains used by the simulator: left is [`KinematicChain::biped_leg`],
/// right is its mirror image.
pub fn default_chains() -> [KinematicChain; 2] {
    let left = KinematicChain::biped_leg();
    let right = left.mirrored();
    [left, right]
}

/// Standing joint configuration used to seed the first IK solve.
pub fn ik_seed() -> DVector<f64> {
    DVector::from_vec(vec![0.0, -0.6, 1.2])
}

/// Exact joint states (no encoder noise) for both legs at `times`.
pub fn joint_trajectory(gait: &Gait, chains: &[KinematicChain; 2], times: &[f64]) -> Result<[Vec<JointSample>; 2]> {
    let mut out: [Vec<JointSample>; 2] = [Vec::with_capacity(times.len()), Vec::with_capacity(times.len())];
    for leg in Leg::BOTH {
        let chain = &chains[leg.index()];
        let mut seed = if chain.dof() == 3 { ik_seed() } else { DVector::zeros(chain.dof()) };
        for &t in times {
            let b = gait.base(t);
            let (foot, foot_vel) = gait.foot(leg, t);
            let rt = b.rotation.inverse();
            let rel = rt * (foot - b.position);
            let q = chain.ik_solve(&rel, &seed).map_err(|e| Error::Simulation {
                t,
                reason: format!("{} leg target {:?}: {e}", leg.name(), rel.as_slice()),
            })?;
            let rel_dot = -b.angular_velocity.cross(&rel) + rt * (foot_vel - b.velocity);
            let jac = chain.jacobian(&q);
            let pinv = jac.pseudo_inverse(1e-12).map_err(|e| Error::Simulation { t, reason: e.to_string() })?;
            let dq = pinv * rel_dot;
            out[leg.index()].push(JointSample { t, leg, q: q.clone(), dq });
            seed = q;
        }
    }
    Ok(out)
}

pub fn synthesize_joints(
    gait: &Gait,
    chains: &[KinematicChain; 2],
    noise: &NoiseConfig,
    sim: &SimConfig,
    seed: u64,
) -> Result<[Vec<JointSample>; 2]> {
    let times = time_grid(gait.duration(), sim.joint_rate);
    let mut streams = joint_trajectory(gait, chains, &times)?;
    if !sim.noiseless {
        let mut rng = rng_for(seed, 1);
        let nq = Normal::new(0.0, noise.encoder_position).map_err(|e| Error::Config(e.to_string()))?;
        let ndq = Normal::new(0.0, noise.encoder_velocity).map_err(|e| Error::Config(e.to_string()))?;
        for stream in streams.iter_mut() {
            for s in stream.iter_mut() {
                s.q.iter_mut().for_each(|v| *v += nq.sample(&mut rng));
                s.dq.iter_mut().for_each(|v| *v += ndq.sample(&mut rng));
            }
        }
    }
    Ok(streams)
}

pub fn synthesize_forces(gait: &Gait, sim: &SimConfig, seed: u64) -> Vec<ForceSample> {
    let mut rng = rng_for(seed, 2);
    let sigma = if sim.noiseless { 0.0 } else { sim.force_noise };
    time_grid(gait.duration(), sim.joint_rate)
        .into_iter()
        .map(|t| {
            let mut fz = [gait.force(Leg::Left, t), gait.force(Leg::Right, t)];
            for f in fz.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *f += sigma * n;
            }
            ForceSample { t, fz }
        })
        .collect()
}

pub fn synthesize_lidar(
    motion: &dyn BaseMotion,
    duration: f64,
    world: &WorldModel,
    ext: &Extrinsics,
    noise: &NoiseConfig,
    sim: &SimConfig,
    seed: u64,
) -> Vec<LidarScan> {
    let mut rng = rng_for(seed, 3);
    let sigma = if sim.noiseless { 0.0 } else { noise.lidar_point };
    let range_noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let total_area: f64 = world.planes.iter().map(Plane::area).sum();
    let period_ns = (1e9 / sim.lidar_rate).round() as u64;
    let end_ns = (duration * 1e9).round() as u64;
    let mut scans = Vec::new();
    let mut k = 1u64;
    while k * period_ns < end_ns {
        let scan_end_ns = k * period_ns;
        let mut offsets: Vec<u64> = (0..sim.points_per_scan).map(|_| rng.random_range(0..period_ns)).collect();
        offsets.sort_unstable_by(|a, b| b.cmp(a));
        let mut points = Vec::with_capacity(sim.points_per_scan);
        for off in offsets {
            let t = (scan_end_ns - off) as f64 / 1e9;
            let b = motion.base(t);
            let r_wl = b.rotation * ext.rotation;
            let origin = b.position + b.rotation * ext.translation;
            loop {
                let mut pick = rng.random_range(0.0..total_area);
                let plane = world
                    .planes
                    .iter()
                    .find(|pl| {
                        if pick < pl.area() {
                            true
                        } else {
                            pick -= pl.area();
                            false
                        }
                    })
                    .unwrap_or(&world.planes[world.planes.len() - 1]);
                let w = plane.anchor
                    + plane.u * rng.random_range(0.0..plane.extent_u)
                    + plane.v * rng.random_range(0.0..plane.extent_v);
                let local = r_wl.inverse() * (w - origin);
                let range = local.norm();
                if !(LIDAR_MIN_RANGE..=LIDAR_MAX_RANGE).contains(&range) {
                    continue;
                }
                let noisy = if sigma > 0.0 { local * ((range + range_noise.sample(&mut rng)) / range) } else { local };
                points.push(LidarPoint { position: noisy, t });
                break;
            }
        }
        scans.push(LidarScan { end_time: scan_end_ns as f64 / 1e9, points });
        k += 1;
    }
    scans
}

/// Everything one simulated run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub params: GaitParams,
    pub sim: SimConfig,
    pub gait: Gait,
    pub truth: GroundTruth,
    pub imu: ImuStream,
    pub joints: [Vec<JointSample>; 2],
    pub forces: Vec<ForceSample>,
    pub scans: Vec<LidarScan>,
    pub chains: [KinematicChain; 2],
    pub extrinsics: Extrinsics,
    pub world: WorldModel,
}

pub fn simulate(params: &GaitParams, noise: &NoiseConfig, sim: &SimConfig) -> Result<SimOutput> {
    sim.validate()?;
    noise.validate()?;
    let (gait, truth) = generate_gait(params, sim.joint_rate)?;
    let chains = default_chains();
    let extrinsics = Extrinsics::default();
    let world = WorldModel::room(params.pattern);
    let imu = synthesize_imu(&gait, params.duration, noise, sim, params.seed);
    let joints = synthesize_joints(&gait, &chains, noise, sim, params.seed)?;
    let forces = synthesize_forces(&gait, sim, params.seed);
    let scans = synthesize_lidar(&gait, params.duration, &world, &extrinsics, noise, sim, params.seed);
    Ok(SimOutput { params: params.clone(), sim: sim.clone(), gait, truth, imu, joints, forces, scans, chains, extrinsics, world })
}
