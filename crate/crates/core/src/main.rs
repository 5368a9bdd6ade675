use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;

use liko::dataset::{self, Dataset};
use liko::evaluation::{self, differentiate, DEFAULT_MAX_DT, VELOCITY_WINDOW};
use liko::jacobian_check::{check_all, DEFAULT_TRIALS, TOLERANCE};
use liko::pipeline::{run_filter, RunConfig};
use liko::simulator::{simulate, GaitParams, GaitPattern, SimConfig};
use liko::state::NoiseConfig;
use liko::Error;

#[derive(Parser)]
#[command(name = "liko", version, about = "LiDAR-inertial-kinematic odometry for biped robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a biped walk and write a dataset directory with ground truth.
    Sim {
        #[arg(long, default_value = "square_walk")]
        pattern: GaitPattern,
        #[arg(long, default_value_t = 60.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable all sensor noise and biases.
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter on a dataset directory.
    Run {
        /// TOML run configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated TUM trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        rpe_delta: f64,
        /// Estimated velocity CSV; the trajectory is differentiated when omitted.
        #[arg(long)]
        est_vel: Option<PathBuf>,
    },
    /// Compare every analytic Jacobian against central finite differences.
    CheckJacobians {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
    },
}

enum Failure {
    Data(Error),
    Oracle,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn sim(pattern: GaitPattern, duration: f64, seed: u64, noiseless: bool, out: &Path) -> Result<(), Failure> {
    let params = GaitParams { pattern, duration, seed, ..GaitParams::default() };
    let sim = SimConfig { noiseless, ..SimConfig::default() };
    let output = simulate(&params, &NoiseConfig::default(), &sim)?;
    let ds = Dataset::from_sim(&output);
    dataset::write_dataset(out, &ds)?;
    println!(
        "wrote {}: {} imu, {} + {} joint, {} force samples, {} scans",
        out.display(),
        ds.imu.len(),
        ds.joints[0].len(),
        ds.joints[1].len(),
        ds.forces.len(),
        ds.scans.len()
    );
    Ok(())
}

fn run(config: Option<&Path>, dataset_dir: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => dataset::load_config(p)?,
        None => RunConfig::default(),
    };
    let ds = dataset::load_dataset(dataset_dir)?;
    let start = Instant::now();
    let result = run_filter(&ds, &cfg)?;
    let wall = start.elapsed().as_secs_f64();
    dataset::write_run_output(out, &result.samples, &result.stats)?;
    let s = &result.stats;
    println!("mode: {}", s.mode);
    println!("output samples: {}", s.output_samples);
    println!("kinematic updates: {}", s.kinematic_updates);
    println!("lidar updates: {} (mean {:.1} rows)", s.lidar_updates, s.mean_lidar_rows);
    println!("skipped scans: {} deskew, {} no correspondence", s.skipped_scans_deskew, s.skipped_scans_no_correspondence);
    println!("iterations: {:?}", s.iteration_histogram);
    println!("wall time: {wall:.3} s");
    info!("results written to {}", out.display());
    Ok(())
}

fn eval(est: &Path, gt: &Path, rpe_delta: f64, est_vel: Option<&Path>) -> Result<(), Failure> {
    let est_traj = dataset::read_tum(est)?;
    let gt_traj = dataset::read_tum(gt)?;
    let (ape, alignment) = evaluation::ape(&est_traj, &gt_traj, DEFAULT_MAX_DT)?;
    let rpe = evaluation::rpe_percent(&est_traj, &gt_traj, rpe_delta, DEFAULT_MAX_DT)?;
    let est_v = match est_vel {
        Some(p) => dataset::read_velocities(p)?,
        None => differentiate(&est_traj),
    };
    let vel = evaluation::velocity_rmse(&est_v, &differentiate(&gt_traj), VELOCITY_WINDOW, &alignment.rotation, DEFAULT_MAX_DT)?;
    println!("APE RMSE:      {ape:.6} m");
    println!("RPE ({rpe_delta} m):   {rpe:.6} %");
    println!("Velocity RMSE: {vel:.6} m/s");
    println!("ape_rmse_m={ape:.6}");
    println!("rpe_percent={rpe:.6}");
    println!("vel_rmse_mps={vel:.6}");
    Ok(())
}

fn check_jacobians(seed: u64, trials: usize) -> Result<(), Failure> {
    let results = check_all(seed, trials);
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<12} trials={} max_rel_err={:.3e} {status}", r.name, r.trials, r.max_relative_error);
        ok &= r.passed();
    }
    println!("tolerance={TOLERANCE:e}");
    if ok {
        Ok(())
    } else {
        Err(Failure::Oracle)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Sim { pattern, duration, seed, noiseless, out } => sim(pattern, duration, seed, noiseless, &out),
        Command::Run { config, dataset, out } => run(config.as_deref(), &dataset, &out),
        Command::Eval { est, gt, rpe_delta, est_vel } => eval(&est, &gt, rpe_delta, est_vel.as_deref()),
        Command::CheckJacobians { seed, trials } => check_jacobians(seed, trials),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Oracle) => {
            eprintln!("error: Jacobian check failed");
            ExitCode::from(3)
        }
    }
}
