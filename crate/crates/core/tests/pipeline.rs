use liko::dataset::{trajectory_of, Dataset};
use liko::evaluation::{ape, DEFAULT_MAX_DT};
use liko::pipeline::{run_filter, schedule, EventKind, Mode, RunConfig};
use liko::simulator::{simulate, GaitParams, GaitPattern, SimConfig};
use liko::state::NoiseConfig;

fn dataset(pattern: GaitPattern, duration: f64, seed: u64, noiseless: bool) -> Dataset {
    let params = GaitParams { pattern, duration, seed, ..GaitParams::default() };
    let sim = simulate(&params, &NoiseConfig::default(), &SimConfig { noiseless, ..SimConfig::default() }).unwrap();
    Dataset::from_sim(&sim)
}

fn config(mode: Mode) -> RunConfig {
    RunConfig { mode, ..RunConfig::default() }
}

#[test]
fn schedule_orders_ties_and_merges_legs() {
    let ds = dataset(GaitPattern::Stand, 3.0, 1, false);
    let events = schedule(&ds, Mode::Liko).unwrap();
    for w in events.windows(2) {
        assert!(w[0].t <= w[1].t);
    }
    let joints = events.iter().filter(|e| matches!(e.kind, EventKind::Joint { .. })).count();
    assert_eq!(joints, ds.joints[0].len());
    assert!(events.iter().all(|e| match e.kind {
        EventKind::Joint { left, right, update } => left.is_some() && right.is_some() && update,
        _ => true,
    }));

    let scan_t = ds.scans[3].end_time;
    let kinds: Vec<_> = events.iter().filter(|e| e.t == scan_t).map(|e| e.kind).collect();
    let rank = |k: &EventKind| match k {
        EventKind::Imu(_) => 0,
        EventKind::Force(_) => 1,
        EventKind::Joint { .. } => 2,
        EventKind::Lidar(_) => 3,
    };
    assert!(kinds.len() >= 2);
    assert!(kinds.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])));
    assert!(matches!(kinds.last(), Some(EventKind::Lidar(3))));
}

#[test]
fn kinematics_only_mode_drops_scans() {
    let ds = dataset(GaitPattern::Stand, 3.0, 1, false);
    let events = schedule(&ds, Mode::LikoIk).unwrap();
    assert!(!events.iter().any(|e| matches!(e.kind, EventKind::Lidar(_))));
    let events = schedule(&ds, Mode::LikoLi).unwrap();
    assert!(events.iter().all(|e| !matches!(e.kind, EventKind::Joint { update: true, .. })));
}

#[test]
fn out_of_order_stream_rejected() {
    let mut ds = dataset(GaitPattern::Stand, 3.0, 1, false);
    ds.forces.swap(10, 11);
    let err = schedule(&ds, Mode::Liko).unwrap_err().to_string();
    assert!(err.contains("forces"), "{err}");
}

#[test]
fn missing_scans_rejected_for_lidar_modes() {
    let mut ds = dataset(GaitPattern::Stand, 3.0, 1, false);
    ds.scans.clear();
    let err = run_filter(&ds, &config(Mode::Liko)).unwrap_err().to_string();
    assert!(err.contains("LiDAR required for mode liko"), "{err}");
    assert!(run_filter(&ds, &config(Mode::LikoLi)).is_err());
    let out = run_filter(&ds, &config(Mode::LikoIk)).unwrap();
    assert_eq!(out.samples.len(), ds.joints[0].len());
}

#[test]
fn noiseless_square_walk_is_accurate() {
    let ds = dataset(GaitPattern::SquareWalk, 60.0, 2, true);
    let out = run_filter(&ds, &config(Mode::Liko)).unwrap();
    let (err, _) = ape(&trajectory_of(&out.samples), ds.groundtruth.as_ref().unwrap(), DEFAULT_MAX_DT).unwrap();
    assert!(err < 1e-3, "APE {err}");
    assert_eq!(out.stats.output_samples, ds.joints[0].len());
    assert!(out.stats.lidar_updates > 0);
    assert!(out.stats.kinematic_updates > 0);
}

#[test]
fn kinematics_only_run_completes() {
    let ds = dataset(GaitPattern::SquareWalk, 12.0, 3, false);
    let out = run_filter(&ds, &config(Mode::LikoIk)).unwrap();
    assert_eq!(out.stats.lidar_updates, 0);
    assert!(out.samples.iter().all(|s| s.position.iter().all(|v| v.is_finite())));
}

#[test]
fn repeated_runs_are_identical() {
    let ds = dataset(GaitPattern::SquareWalk, 8.0, 4, false);
    let a = run_filter(&ds, &config(Mode::Liko)).unwrap();
    let b = run_filter(&ds, &config(Mode::Liko)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.final_covariance, b.final_covariance);
}
