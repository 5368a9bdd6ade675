//! On-disk formats: dataset directories, run configuration, trajectory and
//! time-series exports.
//!
//! Every CSV file starts with a header line and stores floats with 17
//! significant digits, so a write followed by a read reproduces the values
//! bit for bit. Files are written to a temporary sibling and renamed into
//! place.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{PoseSample, Trajectory, VelocitySample};
use crate::kinematics::ChainConfig;
use crate::lidar::{Extrinsics, LidarPoint, LidarScan};
use crate::manifold::{exp_so3, log_so3};
use crate::pipeline::{OutputSample, RunConfig, RunStats};
use crate::simulator::SimOutput;
use crate::state::{ForceSample, ImuSample, JointSample, Leg};

pub const IMU_FILE: &str = "imu.csv";
pub const JOINT_FILES: [&str; 2] = ["joints_left.csv", "joints_right.csv"];
pub const FORCE_FILE: &str = "forces.csv";
pub const SCAN_DIR: &str = "scans";
pub const META_FILE: &str = "meta.toml";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.tum";

pub const TRAJECTORY_FILE: &str = "trajectory.tum";
pub const FOOTHOLD_FILE: &str = "foothold.csv";
pub const VELOCITY_FILE: &str = "velocity.csv";
pub const STATS_FILE: &str = "stats.toml";

/// LiDAR-to-IMU extrinsics as written in the meta file; the rotation is a
/// rotation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicsConfig {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl ExtrinsicsConfig {
    pub fn to_extrinsics(&self) -> Extrinsics {
        Extrinsics {
            rotation: exp_so3(&Vector3::from(self.rotation)),
            translation: Vector3::from(self.translation),
        }
    }

    pub fn from_extrinsics(e: &Extrinsics) -> Self {
        Self { rotation: log_so3(&e.rotation).into(), translation: e.translation.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    pub imu: f64,
    pub joint: f64,
    pub lidar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    /// Joints per leg.
    pub dof: usize,
    pub duration: f64,
    pub rates: Rates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub extrinsics: ExtrinsicsConfig,
    pub left_leg: ChainConfig,
    pub right_leg: ChainConfig,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub imu: Vec<ImuSample>,
    pub joints: [Vec<JointSample>; 2],
    pub forces: Vec<ForceSample>,
    pub scans: Vec<LidarScan>,
    pub groundtruth: Option<Trajectory>,
}

impl Dataset {
    pub fn from_sim(sim: &SimOutput) -> Self {
        let [left, right] = &sim.chains;
        let meta = DatasetMeta {
            dof: left.dof(),
            duration: sim.params.duration,
            rates: Rates { imu: sim.sim.imu_rate, joint: sim.sim.joint_rate, lidar: sim.sim.lidar_rate },
            pattern: Some(sim.params.pattern.to_string()),
            seed: Some(sim.params.seed),
            extrinsics: ExtrinsicsConfig::from_extrinsics(&sim.extrinsics),
            left_leg: left.to_config(),
            right_leg: right.to_config(),
        };
        let gt = sim
            .truth
            .samples
            .iter()
            .map(|s| PoseSample {
                t: s.t,
                position: s.position,
                orientation: UnitQuaternion::from_rotation_matrix(&s.rotation),
            })
            .collect();
        Self {
            meta,
            imu: sim.imu.samples.clone(),
            joints: sim.joints.clone(),
            forces: sim.forces.clone(),
            scans: sim.scans.clone(),
            groundtruth: Some(Trajectory { samples: gt }),
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>, preamble: Option<String>) -> Result<()> {
    let mut buf = Vec::new();
    if let Some(p) = preamble {
        buf.extend_from_slice(p.as_bytes());
        buf.push(b'\n');
    }
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut buf);
        let write = || -> std::result::Result<(), csv::Error> {
            w.write_record(header)?;
            for row in rows {
                w.write_record(row.iter().map(|v| fmt(*v)))?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    }
    write_atomic(path, &buf)
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn joint_header(dof: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..dof).map(|i| format!("q{i}")));
    h.extend((0..dof).map(|i| format!("dq{i}")));
    h
}

fn scan_file_name(index: usize) -> String {
    format!("scan_{index:06}.csv")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join(SCAN_DIR)).map_err(io_err(dir))?;
    write_csv(
        &dir.join(IMU_FILE),
        &names(&["t", "wx", "wy", "wz", "ax", "ay", "az"]),
        ds.imu.iter().map(|s| vec![s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z]),
        None,
    )?;
    for (leg, file) in Leg::BOTH.into_iter().zip(JOINT_FILES) {
        write_csv(
            &dir.join(file),
            &joint_header(ds.meta.dof),
            ds.joints[leg.index()].iter().map(|s| {
                let mut row = vec![s.t];
                row.extend(s.q.iter());
                row.extend(s.dq.iter());
                row
            }),
            None,
        )?;
    }
    write_csv(
        &dir.join(FORCE_FILE),
        &names(&["t", "fz_left", "fz_right"]),
        ds.forces.iter().map(|s| vec![s.t, s.fz[0], s.fz[1]]),
        None,
    )?;
    for (i, scan) in ds.scans.iter().enumerate() {
        write_csv(
            &dir.join(SCAN_DIR).join(scan_file_name(i)),
            &names(&["t", "x", "y", "z"]),
            scan.points.iter().map(|p| vec![p.t, p.position.x, p.position.y, p.position.z]),
            Some(format!("# end_time={}", fmt(scan.end_time))),
        )?;
    }
    let meta = toml::to_string(&ds.meta).map_err(|e| Error::Dataset(format!("{META_FILE}: {e}")))?;
    write_atomic(&dir.join(META_FILE), meta.as_bytes())?;
    if let Some(gt) = &ds.groundtruth {
        write_tum(&dir.join(GROUNDTRUTH_FILE), gt)?;
    }
    Ok(())
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn data_err(file: &str, line: u64, reason: impl Into<String>) -> Error {
    Error::Data { file: file.to_string(), line, reason: reason.into() }
}

/// Parses a headered numeric CSV. `line_offset` counts lines consumed before
/// the header.
fn read_csv_rows(reader: impl Read, label: &str, width: usize, line_offset: u64, strict: bool) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header_len = rdr.headers().map_err(|e| data_err(label, line_offset + 1, e.to_string()))?.len();
    if header_len != width {
        return Err(data_err(label, line_offset + 1, format!("expected {width} header fields, got {header_len}")));
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(label, line + line_offset, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line()) + line_offset;
        if record.len() != width {
            return Err(data_err(label, line, format!("expected {width} fields, got {}", record.len())));
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| data_err(label, line, format!("field {} is not a finite number: '{f}'", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, values));
    }
    check_monotone(label, rows.iter().map(|(l, r)| (*l, r[0])), strict)?;
    Ok(rows)
}

/// Scan points may share a timestamp, so they only need to be non-decreasing.
fn check_monotone(label: &str, times: impl Iterator<Item = (u64, f64)>, strict: bool) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (line, t) in times {
        if t < prev || (strict && t == prev) {
            return Err(data_err(label, line, format!("time {t} does not increase (previous {prev})")));
        }
        prev = t;
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn read_table(path: &Path, width: usize) -> Result<Vec<(u64, Vec<f64>)>> {
    read_csv_rows(open(path)?, &file_label(path), width, 0, true)
}

fn read_scan(path: &Path) -> Result<LidarScan> {
    let label = format!("{SCAN_DIR}/{}", file_label(path));
    let mut reader = open(path)?;
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(path))?;
    let end_time = first
        .trim()
        .strip_prefix("# end_time=")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| data_err(&label, 1, "expected '# end_time=<t>' as the first line"))?;
    let rows = read_csv_rows(reader, &label, 4, 1, false)?;
    let points: Vec<LidarPoint> = rows
        .into_iter()
        .map(|(_, r)| LidarPoint { position: Vector3::new(r[1], r[2], r[3]), t: r[0] })
        .collect();
    if let Some(last) = points.last() {
        if last.t > end_time {
            return Err(data_err(&label, 1, format!("point time {} after scan end {end_time}", last.t)));
        }
    }
    Ok(LidarScan { end_time, points })
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let meta: DatasetMeta = toml::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", file_label(path))))?;
    for (name, leg) in [("left_leg", &meta.left_leg), ("right_leg", &meta.right_leg)] {
        if leg.joints.len() != meta.dof {
            return Err(Error::Dataset(format!(
                "{}: {name} has {} joints but dof = {}",
                file_label(path),
                leg.joints.len(),
                meta.dof
            )));
        }
    }
    Ok(meta)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let meta = read_meta(&dir.join(META_FILE))?;
    let imu = read_table(&dir.join(IMU_FILE), 7)?
        .into_iter()
        .map(|(_, r)| ImuSample { t: r[0], gyro: Vector3::new(r[1], r[2], r[3]), accel: Vector3::new(r[4], r[5], r[6]) })
        .collect();
    let m = meta.dof;
    let mut joints: [Vec<JointSample>; 2] = [Vec::new(), Vec::new()];
    for (leg, file) in Leg::BOTH.into_iter().zip(JOINT_FILES) {
        joints[leg.index()] = read_table(&dir.join(file), 1 + 2 * m)?
            .into_iter()
            .map(|(_, r)| JointSample {
                t: r[0],
                leg,
                q: DVector::from_column_slice(&r[1..1 + m]),
                dq: DVector::from_column_slice(&r[1 + m..]),
            })
            .collect();
    }
    let forces = read_table(&dir.join(FORCE_FILE), 3)?
        .into_iter()
        .map(|(_, r)| ForceSample { t: r[0], fz: [r[1], r[2]] })
        .collect();

    let scan_dir = dir.join(SCAN_DIR);
    let mut scan_paths: Vec<PathBuf> = match fs::read_dir(&scan_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&scan_dir, e)),
    };
    scan_paths.sort();
    let scans = scan_paths.iter().map(|p| read_scan(p)).collect::<Result<Vec<_>>>()?;
    let mut prev = f64::NEG_INFINITY;
    for (scan, path) in scans.iter().zip(&scan_paths) {
        if !(scan.end_time > prev) {
            return Err(data_err(
                &format!("{SCAN_DIR}/{}", file_label(path)),
                1,
                format!("scan end time {} does not increase (previous {prev})", scan.end_time),
            ));
        }
        prev = scan.end_time;
    }

    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let groundtruth = if gt_path.exists() { Some(read_tum(&gt_path)?) } else { None };
    Ok(Dataset { meta, imu, joints, forces, scans, groundtruth })
}

pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = String::with_capacity(traj.len() * 200);
    out.push_str("# t tx ty tz qx qy qz qw\n");
    for s in &traj.samples {
        let q = s.orientation.quaternion();
        let fields = [s.t, s.position.x, s.position.y, s.position.z, q.i, q.j, q.k, q.w];
        let line: Vec<String> = fields.iter().map(|v| fmt(*v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let label = file_label(path);
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(data_err(&label, n, format!("expected 8 fields, got {}", fields.len())));
        }
        let v = fields
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| data_err(&label, n, "non-numeric field"))?;
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-9 {
            return Err(data_err(&label, n, "zero quaternion"));
        }
        if let Some(prev) = samples.last().map(|s: &PoseSample| s.t) {
            if !(v[0] > prev) {
                return Err(data_err(&label, n, format!("time {} does not increase (previous {prev})", v[0])));
            }
        }
        samples.push(PoseSample {
            t: v[0],
            position: Vector3::new(v[1], v[2], v[3]),
            orientation: UnitQuaternion::from_quaternion(q),
        });
    }
    Ok(Trajectory { samples })
}

pub fn write_vectors(path: &Path, columns: [&str; 4], rows: impl Iterator<Item = (f64, Vector3<f64>)>) -> Result<()> {
    write_csv(path, &names(&columns), rows.map(|(t, v)| vec![t, v.x, v.y, v.z]), None)
}

pub fn read_velocities(path: &Path) -> Result<Vec<VelocitySample>> {
    Ok(read_table(path, 4)?
        .into_iter()
        .map(|(_, r)| VelocitySample { t: r[0], velocity: Vector3::new(r[1], r[2], r[3]) })
        .collect())
}

pub fn trajectory_of(samples: &[OutputSample]) -> Trajectory {
    Trajectory {
        samples: samples
            .iter()
            .map(|s| PoseSample {
                t: s.t,
                position: s.position,
                orientation: UnitQuaternion::from_rotation_matrix(&s.rotation),
            })
            .collect(),
    }
}

/// Writes trajectory, foothold, velocity and stats files into `dir`.
pub fn write_run_output(dir: &Path, samples: &[OutputSample], stats: &RunStats) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_tum(&dir.join(TRAJECTORY_FILE), &trajectory_of(samples))?;
    write_vectors(&dir.join(FOOTHOLD_FILE), ["t", "px", "py", "pz"], samples.iter().map(|s| (s.t, s.contact)))?;
    write_vectors(&dir.join(VELOCITY_FILE), ["t", "vx", "vy", "vz"], samples.iter().map(|s| (s.t, s.velocity)))?;
    let text = toml::to_string(stats).map_err(|e| Error::Dataset(format!("{STATS_FILE}: {e}")))?;
    write_atomic(&dir.join(STATS_FILE), text.as_bytes())
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file_label(path))))?;
    cfg.validate()?;
    Ok(cfg)
}
