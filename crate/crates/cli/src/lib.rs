//! Command-line front door: synthesize, emulate, track, run odometry,
//! evaluate, benchmark and print the link-latency model.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use ofvio::bench::{bench_frontends, with_emulated_flow, BenchConfig, BenchError};
use ofvio::dataset::{load_sequence, read_tum, save_sequence, write_tum, DatasetError, Sequence, SyntheticSetup};
use ofvio::estimator::{run_odometry, write_diagnostics_csv, EstimatorError, FrontEndKind, OdometryConfig};
use ofvio::eval::{
    align_sim3, associate, evaluate, subtrajectory_csv, subtrajectory_errors, subtrajectory_svg, trajectory_svg,
    EvalError, DEFAULT_MAX_DT,
};
use ofvio::host_tracker::{write_host_track_csv, HostFrontEnd};
use ofvio::sensor_emu::{SensorConfig, SensorError};
use ofvio::timing_model::{
    breakdown_svg, compose_breakdown, flow_tx_latency, format_sig, image_tx_latency, reference_stages, FrameRateTable,
    LinkConfig, TimingError,
};
use ofvio::tracker::{write_track_csv, PixelMapping, TrackerState};

/// Exit code for usage and validation errors.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit code for runtime failures.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<SensorError> for CliError {
    fn from(e: SensorError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TimingError> for CliError {
    fn from(e: TimingError) -> Self {
        match e {
            TimingError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Precondition(_) | EstimatorError::Initialization(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::NoRepetitions | BenchError::MissingStream { .. } => CliError::Validation(e.to_string()),
            BenchError::Estimator(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ofvio", version, about = "Optical-flow sensor emulation and visual-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic sequence to a directory.
    Synth(SynthArgs),
    /// Run the sensor emulator over a sequence and store its flow records.
    Emulate(EmulateArgs),
    /// Run a front-end and write its feature tracks as CSV.
    Track(TrackArgs),
    /// Run front-end plus estimator and write a TUM trajectory.
    Odometry(OdometryArgs),
    /// Compare an estimated trajectory against ground truth.
    Eval(EvalArgs),
    /// Time both front-ends and the estimator.
    Bench(BenchArgs),
    /// Print link latencies and the latency breakdown for reference stage timings.
    LatencyModel(LatencyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Scenario {
    CircleFigureEight,
    Stationary,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, value_enum, default_value = "circle-figure-eight")]
    scenario: Scenario,
    /// Scene and noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EmulateArgs {
    #[arg(long)]
    seq: PathBuf,
    /// Sensor parameters as key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output sequence directory (frames, IMU and ground truth are copied).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value = "of")]
    front_end: FrontEndKind,
    /// Sensor parameters for emulation when the sequence has no flow.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Track CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OdometryArgs {
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value = "of")]
    front_end: FrontEndKind,
    /// Odometry parameters as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for trajectory.txt, diagnostics.csv and metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Output directory for metrics.json, subtrajectories.csv and plots.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_DT)]
    max_dt: f64,
    /// Prefix duration for the prefix-only alignment, seconds.
    #[arg(long, default_value_t = 15.0)]
    prefix: f64,
    /// Comma-separated sub-trajectory lengths, metres.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 5.0, 10.0, 20.0])]
    lengths: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Sequence directory; a short synthetic sequence is rendered when absent.
    #[arg(long)]
    seq: Option<PathBuf>,
    /// Odometry parameters as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Run both paths sequentially (the default).
    #[arg(long, conflicts_with = "parallel")]
    single_thread: bool,
    /// Run the two paths concurrently; not comparable with single-thread numbers.
    #[arg(long)]
    parallel: bool,
    /// Seed of the synthetic sequence when `--seq` is absent.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for timings.json and breakdown.svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LatencyArgs {
    #[arg(long, default_value_t = 640)]
    width: u64,
    #[arg(long, default_value_t = 480)]
    height: u64,
    /// Worst-case flow vectors per frame.
    #[arg(long, default_value_t = 300)]
    vectors: u64,
    /// Frame-rate table CSV; the shipped table is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sensor format for the frame-rate lookup (QVGA, VGA, FULL).
    #[arg(long)]
    format: Option<String>,
    /// Flow vectors configured for the frame-rate lookup.
    #[arg(long, default_value_t = 1024)]
    table_vectors: u32,
    #[arg(long, default_value_t = 20.0)]
    fps: f64,
    #[arg(long, default_value_t = 10.0)]
    rate: f64,
    /// Output directory for timings.json and breakdown.svg.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Emulate(a) => emulate(a),
        Command::Track(a) => track(a),
        Command::Odometry(a) => odometry(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::LatencyModel(a) => latency_model(a),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

fn sensor_config(path: Option<&Path>, seq: &Sequence) -> Result<Option<SensorConfig>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let (cfg, warnings) = SensorConfig::from_kv_text(&read_text(path)?)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    let m = &seq.manifest;
    if cfg.frame_width != m.width || cfg.frame_height != m.height {
        return Err(CliError::Validation(format!(
            "sensor config expects {}x{} frames, sequence has {}x{}",
            cfg.frame_width, cfg.frame_height, m.width, m.height
        )));
    }
    Ok(Some(cfg))
}

fn odometry_config(path: Option<&Path>) -> Result<OdometryConfig, CliError> {
    match path {
        None => Ok(OdometryConfig::default()),
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    if a.duration.is_nan() || a.duration <= 0.0 {
        return Err(CliError::Validation("--duration must be > 0".into()));
    }
    let mut setup = match a.scenario {
        Scenario::CircleFigureEight => SyntheticSetup::circle_figure_eight(a.duration),
        Scenario::Stationary => SyntheticSetup::stationary(a.duration),
    };
    if let Some(seed) = a.seed {
        setup.scene.seed = seed;
        setup.noise.seed = seed;
    }
    let seq = setup.synthesize()?;
    save_sequence(&seq, &a.out)?;
    println!(
        "wrote {} frames, {} IMU samples, {:.1} s to {}",
        seq.frames.len(),
        seq.imu.len(),
        a.duration,
        a.out.display()
    );
    Ok(())
}

fn emulate(a: EmulateArgs) -> Result<(), CliError> {
    let seq = load_sequence(&a.seq)?;
    let sensor = sensor_config(a.config.as_deref(), &seq)?;
    let out = with_emulated_flow(&seq, sensor.as_ref()).map_err(|e| match e {
        BenchError::Sensor(s) => s.into(),
        other => CliError::from(other),
    })?;
    save_sequence(&out, &a.out)?;
    let counts: Vec<usize> = out.flow.values().map(Vec::len).collect();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    println!("emulated {} frames, mean {:.1} flow vectors per frame", counts.len(), mean);
    Ok(())
}

fn track(a: TrackArgs) -> Result<(), CliError> {
    let seq = load_sequence(&a.seq)?;
    let file = fs::File::create(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    let mut w = BufWriter::new(file);
    match a.front_end {
        FrontEndKind::Of => {
            let seq = if seq.flow.is_empty() {
                let sensor = sensor_config(a.config.as_deref(), &seq)?;
                with_emulated_flow(&seq, sensor.as_ref()).map_err(CliError::from)?
            } else {
                seq
            };
            let m = &seq.manifest;
            let mapping = PixelMapping {
                camera: m.camera,
                origin: m.flow_origin,
                scale: m.flow_scale,
            };
            let mut tracker = TrackerState::new(mapping, OdometryConfig::default().tracker_capacity);
            // Tracks leave the state when they end, so each is written once, at its end.
            let mut finished = Vec::new();
            let empty = Vec::new();
            for f in &seq.frames {
                let before = tracker.tracks().clone();
                let flow = seq.flow.get(&f.frame_id).unwrap_or(&empty);
                tracker
                    .update(f.frame_id, flow)
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                finished.extend(before.into_iter().filter(|(id, _)| !tracker.tracks().contains_key(id)).map(|(_, t)| t));
            }
            finished.extend(tracker.tracks().values().cloned());
            write_track_csv(&mut w, finished.iter())?;
            println!("wrote {} tracks to {}", finished.len(), a.out.display());
        }
        FrontEndKind::Host => {
            let mut front = HostFrontEnd::new(seq.manifest.camera, OdometryConfig::default().host);
            let mut finished = Vec::new();
            for f in &seq.frames {
                let before = front.tracks().clone();
                front
                    .process_frame(f.frame_id, &f.image)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                finished.extend(before.into_iter().filter(|(id, _)| !front.tracks().contains_key(id)).map(|(_, t)| t));
            }
            finished.extend(front.tracks().values().cloned());
            write_host_track_csv(&mut w, finished.iter())?;
            println!("wrote {} tracks to {}", finished.len(), a.out.display());
        }
    }
    w.flush()?;
    Ok(())
}

fn odometry(a: OdometryArgs) -> Result<(), CliError> {
    let seq = load_sequence(&a.seq)?;
    let cfg = odometry_config(a.config.as_deref())?;
    let result = run_odometry(&seq, a.front_end, &cfg)?;
    ensure_dir(&a.out)?;
    write_tum(&a.out.join("trajectory.txt"), &result.trajectory)?;
    let mut diag = Vec::new();
    write_diagnostics_csv(&mut diag, &result.diagnostics)?;
    write_file(&a.out.join("diagnostics.csv"), &String::from_utf8_lossy(&diag))?;
    println!("{} poses written to {}", result.trajectory.len(), a.out.join("trajectory.txt").display());
    if !seq.ground_truth.is_empty() {
        match evaluate(&result.trajectory, &seq.ground_truth, DEFAULT_MAX_DT, 15.0) {
            Ok(m) => {
                write_file(&a.out.join("metrics.json"), &to_json(&m)?)?;
                println!(
                    "ATE (sim3) {:.4} m over {:.2} m path ({:.3}%)",
                    m.sim3.rmse,
                    m.path_length_m,
                    100.0 * m.ate_over_path
                );
            }
            Err(e) => log::warn!("skipping metrics: {e}"),
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let est = read_tum(&a.est)?;
    let gt = read_tum(&a.gt)?;
    let metrics = evaluate(&est, &gt, a.max_dt, a.prefix)?;
    let pairs = associate(&est, &gt, a.max_dt)?;
    let subs = subtrajectory_errors(&pairs, &a.lengths, a.samples, a.seed);
    let aligned = align_sim3(&pairs)?.apply_pairs(&pairs);
    ensure_dir(&a.out)?;
    write_file(&a.out.join("metrics.json"), &to_json(&metrics)?)?;
    write_file(&a.out.join("subtrajectories.csv"), &subtrajectory_csv(&subs))?;
    write_file(&a.out.join("trajectory.svg"), &trajectory_svg(&aligned))?;
    write_file(&a.out.join("subtrajectories.svg"), &subtrajectory_svg(&subs))?;
    println!(
        "pairs {}  path {:.3} m  ATE sim3 {:.4} m (sd {:.4})  pose-yaw {:.4} m",
        metrics.pairs, metrics.path_length_m, metrics.sim3.rmse, metrics.sim3.sd, metrics.pose_yaw.rmse
    );
    for s in &subs {
        if let (Some(t), Some(r)) = (&s.translational, &s.rotational) {
            println!(
                "  {:>5.1} m: translational median {:.4} m, rotational median {:.3} deg",
                s.length, t.median, r.median
            );
        }
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let seq = match &a.seq {
        Some(p) => load_sequence(p)?,
        None => {
            let mut setup = SyntheticSetup::circle_figure_eight(5.0);
            setup.scene.seed = a.seed;
            setup.synthesize()?
        }
    };
    let cfg = BenchConfig {
        repetitions: a.reps,
        single_thread: a.single_thread || !a.parallel,
        odometry: odometry_config(a.config.as_deref())?,
        ..BenchConfig::default()
    };
    let report = bench_frontends(&seq, &cfg)?;
    ensure_dir(&a.out)?;
    write_file(&a.out.join("timings.json"), &to_json(&report)?)?;
    write_file(
        &a.out.join("breakdown.svg"),
        &breakdown_svg(&[("OF", &report.of.breakdown), ("host", &report.host.breakdown)]),
    )?;
    print!("{}", report.summary());
    Ok(())
}

fn latency_model(a: LatencyArgs) -> Result<(), CliError> {
    let link = LinkConfig::default();
    let image_ms = image_tx_latency(a.width, a.height, &link)? * 1e3;
    let flow_ms = flow_tx_latency(a.vectors, &link) * 1e3;
    println!("image tx ({}x{}): {} ms", a.width, a.height, format_sig(image_ms, 3));
    println!("flow tx ({} vectors): {} ms", a.vectors, format_sig(flow_ms, 3));
    let table = match &a.config {
        Some(p) => FrameRateTable::load(p)?,
        None => FrameRateTable::shipped(),
    };
    if let Some(format) = &a.format {
        let fps = table.max_frame_rate(format, a.table_vectors)?;
        println!("max frame rate ({format}, {} vectors): {fps} Hz", a.table_vectors);
    }
    let of = compose_breakdown(&reference_stages("of", image_ms, flow_ms)?, a.fps, a.rate)?;
    let base = compose_breakdown(&reference_stages("baseline", image_ms, 0.0)?, a.fps, a.rate)?;
    for (name, b) in [("of", &of), ("baseline", &base)] {
        println!(
            "{name}: end-to-end {} ms, compute path {} ms, per estimate {} ms ({} ms with send)",
            format_sig(b.end_to_end_ms, 3),
            format_sig(b.compute_path_ms, 3),
            format_sig(b.per_estimate_mean_ms, 3),
            format_sig(b.per_estimate_with_send_ms, 3)
        );
    }
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let json = serde_json::json!({ "image_tx_ms": image_ms, "flow_tx_ms": flow_ms, "of": of, "baseline": base });
        write_file(&out.join("timings.json"), &to_json(&json)?)?;
        write_file(&out.join("breakdown.svg"), &breakdown_svg(&[("OF", &of), ("baseline", &base)]))?;
    }
    Ok(())
}
