//! Wall-clock benchmark of the two front-ends and the estimator tick.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sequence;
use crate::estimator::{run_odometry, EstimatorError, FrontEndKind, OdometryConfig};
use crate::host_tracker::{HostFrontEnd, HostTrackerError};
use crate::sensor_emu::{emulate_stream, SensorConfig, SensorError};
use crate::timing_model::{
    compose_breakdown, flow_tx_latency, image_tx_latency, LatencyBreakdown, LinkConfig, StageInputs, StageStats,
    TimingError,
};
use crate::tracker::{PixelMapping, TrackerError, TrackerState};

pub const DEFAULT_WARMUP: usize = 10;

/// Printed at the top of every report.
pub const REPORT_NOTE: &str = "compute stages only; message-bus publish cost is not modeled";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("repetitions must be >= 1")]
    NoRepetitions,
    #[error("{path} path: {detail}")]
    MissingStream { path: &'static str, detail: String },
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    HostTracker(#[from] HostTrackerError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Timing(#[from] TimingError),
}

/// Raw per-frame samples of one stage, ms, with their statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub samples: Vec<f64>,
    pub stats: StageStats,
}

impl StageTiming {
    pub fn new(name: &str, samples: Vec<f64>) -> Result<Self, TimingError> {
        let stats = StageStats::from_samples(name, &samples)?;
        Ok(Self { samples, stats })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub repetitions: usize,
    /// Leading samples of every stage that are discarded.
    pub warmup: usize,
    /// Run the two paths one after the other (default) or concurrently.
    pub single_thread: bool,
    pub odometry: OdometryConfig,
    /// Used to emulate flow when the sequence carries none.
    pub sensor: Option<SensorConfig>,
    pub link: LinkConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 1,
            warmup: DEFAULT_WARMUP,
            single_thread: true,
            odometry: OdometryConfig::default(),
            sensor: None,
            link: LinkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTimings {
    /// Feature update on every frame, without the hand-off.
    pub feature_update: StageTiming,
    /// Feature update plus the feature-frame hand-off, on estimator frames.
    pub feature_update_send: StageTiming,
    pub estimation: StageTiming,
    pub breakdown: LatencyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub note: String,
    pub repetitions: usize,
    pub warmup: usize,
    pub single_thread: bool,
    pub of: PathTimings,
    pub host: PathTimings,
    /// Empty-stage measurement.
    pub overhead: StageTiming,
    /// Set when the overhead reaches 1% of the smallest stage mean.
    pub overhead_flagged: bool,
}

impl BenchReport {
    /// Host mean over OF mean for the per-frame feature update.
    pub fn update_speedup(&self) -> f64 {
        self.host.feature_update.stats.mean / self.of.feature_update.stats.mean
    }

    pub fn summary(&self) -> String {
        let row = |label: &str, s: &StageStats| {
            format!(
                "{label:<28} mean {:>9.4}  sd {:>9.4}  min {:>9.4}  max {:>9.4}  n {}\n",
                s.mean, s.sd, s.min, s.max, s.count
            )
        };
        let mut out = format!("# {}\n", self.note);
        for (name, p) in [("of", &self.of), ("host", &self.host)] {
            out += &row(&format!("{name} feature update"), &p.feature_update.stats);
            out += &row(&format!("{name} feature update + send"), &p.feature_update_send.stats);
            out += &row(&format!("{name} estimation"), &p.estimation.stats);
            out += &format!(
                "{name} end-to-end {:.3} ms, per estimate {:.3} ms\n",
                p.breakdown.end_to_end_ms, p.breakdown.per_estimate_mean_ms
            );
        }
        out += &format!("feature update speedup (host/of): {:.1}x\n", self.update_speedup());
        if self.overhead_flagged {
            out += &format!(
                "WARNING: harness overhead {:.6} ms is >= 1% of the smallest stage mean\n",
                self.overhead.stats.mean
            );
        }
        out
    }
}

/// Returns `seq` with flow records from a fresh emulator, and the manifest
/// mapping set to the emulator's crop and binning.
pub fn with_emulated_flow(seq: &Sequence, sensor: Option<&SensorConfig>) -> Result<Sequence, BenchError> {
    let m = &seq.manifest;
    let sensor = sensor.cloned().unwrap_or_else(|| SensorConfig {
        frame_width: m.width,
        frame_height: m.height,
        fps: m.frame_rate,
        ..SensorConfig::default()
    });
    let outputs = emulate_stream(seq.frames.iter().map(|f| &f.image), &sensor)?;
    let mut out = seq.clone();
    out.flow = seq.frames.iter().zip(outputs).map(|(f, o)| (f.frame_id, o.flow)).collect();
    let r = sensor.crop_rect();
    out.manifest.flow_origin = (r.x as f64, r.y as f64);
    out.manifest.flow_scale = sensor.subsample as f64;
    Ok(out)
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn drop_warmup(mut v: Vec<f64>, warmup: usize) -> Vec<f64> {
    if v.len() > warmup {
        v.drain(..warmup);
    }
    v
}

struct RawPath {
    update: Vec<f64>,
    update_send: Vec<f64>,
    estimation: Vec<f64>,
}

fn time_of_path(seq: &Sequence, cfg: &BenchConfig) -> Result<RawPath, BenchError> {
    let m = &seq.manifest;
    let mapping = PixelMapping {
        camera: m.camera,
        origin: m.flow_origin,
        scale: m.flow_scale,
    };
    let empty = Vec::new();
    let mut raw = RawPath {
        update: Vec::new(),
        update_send: Vec::new(),
        estimation: Vec::new(),
    };
    for _ in 0..cfg.repetitions {
        let mut tracker = TrackerState::new(mapping, cfg.odometry.tracker_capacity);
        for f in &seq.frames {
            let flow = seq.flow.get(&f.frame_id).unwrap_or(&empty);
            let start = Instant::now();
            black_box(tracker.update(f.frame_id, black_box(flow))?);
            let update = ms_since(start);
            let start = Instant::now();
            let ff = black_box(tracker.emit_feature_frame(f.frame_id, cfg.odometry.decimation)?);
            let send = ms_since(start);
            raw.update.push(update);
            if ff.is_some() {
                raw.update_send.push(update + send);
            }
        }
        let run = run_odometry(seq, FrontEndKind::Of, &cfg.odometry)?;
        raw.estimation.extend(run.diagnostics.iter().map(|d| d.estimator_ms));
    }
    Ok(raw)
}

fn time_host_path(seq: &Sequence, cfg: &BenchConfig) -> Result<RawPath, BenchError> {
    let mut raw = RawPath {
        update: Vec::new(),
        update_send: Vec::new(),
        estimation: Vec::new(),
    };
    for _ in 0..cfg.repetitions {
        let mut front = HostFrontEnd::new(seq.manifest.camera, cfg.odometry.host);
        for f in &seq.frames {
            let start = Instant::now();
            black_box(front.process_frame(f.frame_id, black_box(&f.image))?);
            let update = ms_since(start);
            let start = Instant::now();
            let ff = black_box(front.emit_feature_frame(f.frame_id, cfg.odometry.decimation));
            let send = ms_since(start);
            raw.update.push(update);
            if ff.is_some() {
                raw.update_send.push(update + send);
            }
        }
        let run = run_odometry(seq, FrontEndKind::Host, &cfg.odometry)?;
        raw.estimation.extend(run.diagnostics.iter().map(|d| d.estimator_ms));
    }
    Ok(raw)
}

fn finish_path(
    name: &str,
    raw: RawPath,
    cfg: &BenchConfig,
    image_tx_ms: f64,
    of_tx_ms: f64,
    fps: f64,
) -> Result<PathTimings, BenchError> {
    let w = cfg.warmup;
    let feature_update = StageTiming::new(&format!("{name}_feature_update"), drop_warmup(raw.update, w))?;
    let feature_update_send = StageTiming::new(
        &format!("{name}_feature_update_send"),
        drop_warmup(raw.update_send, w / cfg.odometry.decimation.max(1) as usize),
    )?;
    let estimation = StageTiming::new(
        &format!("{name}_estimation"),
        drop_warmup(raw.estimation, w / cfg.odometry.decimation.max(1) as usize),
    )?;
    let inputs = StageInputs {
        image_tx: StageStats::constant("image_tx", image_tx_ms),
        of_tx: StageStats::constant("of_tx", of_tx_ms),
        feature_update: feature_update.stats.clone(),
        feature_update_send: feature_update_send.stats.clone(),
        estimation: estimation.stats.clone(),
    };
    let breakdown = compose_breakdown(&inputs, fps, fps / cfg.odometry.decimation as f64)?;
    Ok(PathTimings {
        feature_update,
        feature_update_send,
        estimation,
        breakdown,
    })
}

/// Times (a) the OF-path tracker update on precomputed flow, (b) the host
/// detection, tracking and RANSAC, and (c) the estimator tick of each path,
/// per frame over all repetitions.
pub fn bench_frontends(seq: &Sequence, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.repetitions == 0 {
        return Err(BenchError::NoRepetitions);
    }
    if cfg.odometry.decimation == 0 {
        return Err(TrackerError::BadDecimation.into());
    }
    if seq.frames.is_empty() {
        return Err(BenchError::MissingStream {
            path: "host",
            detail: "sequence has no frames".into(),
        });
    }
    let of_seq = if seq.flow.is_empty() {
        with_emulated_flow(seq, cfg.sensor.as_ref()).map_err(|e| BenchError::MissingStream {
            path: "of",
            detail: format!("no flow records and emulation failed: {e}"),
        })?
    } else {
        seq.clone()
    };

    let (of_raw, host_raw) = if cfg.single_thread {
        (time_of_path(&of_seq, cfg), time_host_path(seq, cfg))
    } else {
        std::thread::scope(|s| {
            let of = s.spawn(|| time_of_path(&of_seq, cfg));
            let host = time_host_path(seq, cfg);
            (of.join().expect("of bench thread"), host)
        })
    };
    let (of_raw, host_raw) = (of_raw?, host_raw?);

    let m = &seq.manifest;
    let image_tx_ms = image_tx_latency(m.width as u64, m.height as u64, &cfg.link)? * 1e3;
    let max_vectors = cfg.sensor.as_ref().map_or(SensorConfig::default().max_descriptors, |s| s.max_descriptors);
    let of_tx_ms = flow_tx_latency(max_vectors as u64, &cfg.link) * 1e3;
    let of = finish_path("of", of_raw, cfg, image_tx_ms, of_tx_ms, m.frame_rate)?;
    let host = finish_path("host", host_raw, cfg, image_tx_ms, 0.0, m.frame_rate)?;

    let n = of.feature_update.samples.len().max(100);
    let mut empty = Vec::with_capacity(n);
    for i in 0..n {
        let start = Instant::now();
        black_box(i);
        empty.push(ms_since(start));
    }
    let overhead = StageTiming::new("empty", empty)?;
    let smallest = [&of, &host]
        .iter()
        .flat_map(|p| [&p.feature_update, &p.feature_update_send, &p.estimation])
        .map(|s| s.stats.mean)
        .fold(f64::INFINITY, f64::min);
    Ok(BenchReport {
        note: REPORT_NOTE.into(),
        repetitions: cfg.repetitions,
        warmup: cfg.warmup,
        single_thread: cfg.single_thread,
        overhead_flagged: overhead.stats.mean >= 0.01 * smallest,
        of,
        host,
        overhead,
    })
}
