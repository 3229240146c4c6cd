//! End-to-end odometry driver: front-end, preintegration and window ticks.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EstimatorConfig, EstimatorError, SlidingWindow, WindowFrame};
use crate::dataset::{Sequence, StampedPose};
use crate::geometry::Vec3;
use crate::host_tracker::{HostFrontEnd, HostFrontEndConfig};
use crate::imu_preint::{imu_window, integrate, predict, ImuBias, NavState};
use crate::sensor_emu::{SensorConfig, SensorEmulator};
use crate::tracker::{FeatureFrame, PixelMapping, TrackerState, DEFAULT_CAPACITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontEndKind {
    Of,
    Host,
}

impl std::str::FromStr for FrontEndKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "of" => Ok(Self::Of),
            "host" => Ok(Self::Host),
            other => Err(format!("unknown front-end '{other}' (expected of|host)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryConfig {
    pub estimator: EstimatorConfig,
    /// Estimator tick every `decimation` camera frames.
    pub decimation: u64,
    pub tracker_capacity: usize,
    /// Used when the sequence carries no flow records.
    pub sensor: Option<SensorConfig>,
    pub host: HostFrontEndConfig,
    pub bias: ImuBias,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            decimation: 2,
            tracker_capacity: DEFAULT_CAPACITY,
            sensor: None,
            host: HostFrontEndConfig::default(),
            bias: ImuBias::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickDiagnostics {
    pub frame_id: u64,
    pub t: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub landmarks: usize,
    pub observations: usize,
    pub estimator_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryResult {
    /// Body poses in the world frame, one per estimator tick.
    pub trajectory: Vec<StampedPose>,
    pub diagnostics: Vec<TickDiagnostics>,
    /// Wall time of the front-end update of every frame, ms.
    pub frontend_ms: Vec<f64>,
    /// Cost after each accepted LM step, per tick.
    pub cost_histories: Vec<Vec<f64>>,
}

enum FrontEnd {
    Of {
        emulator: Option<Box<SensorEmulator>>,
        tracker: TrackerState,
    },
    Host(Box<HostFrontEnd>),
}

impl FrontEnd {
    fn new(seq: &Sequence, kind: FrontEndKind, config: &OdometryConfig) -> Result<Self, EstimatorError> {
        let m = &seq.manifest;
        Ok(match kind {
            FrontEndKind::Of => {
                if seq.flow.is_empty() {
                    let sensor = config.sensor.clone().unwrap_or_else(|| SensorConfig {
                        frame_width: m.width,
                        frame_height: m.height,
                        fps: m.frame_rate,
                        ..SensorConfig::default()
                    });
                    let r = sensor.crop_rect();
                    let mapping = PixelMapping {
                        camera: m.camera,
                        origin: (r.x as f64, r.y as f64),
                        scale: sensor.subsample as f64,
                    };
                    FrontEnd::Of {
                        emulator: Some(Box::new(SensorEmulator::new(sensor)?)),
                        tracker: TrackerState::new(mapping, config.tracker_capacity),
                    }
                } else {
                    let mapping = PixelMapping {
                        camera: m.camera,
                        origin: m.flow_origin,
                        scale: m.flow_scale,
                    };
                    FrontEnd::Of {
                        emulator: None,
                        tracker: TrackerState::new(mapping, config.tracker_capacity),
                    }
                }
            }
            FrontEndKind::Host => FrontEnd::Host(Box::new(HostFrontEnd::new(m.camera, config.host))),
        })
    }

    fn step(&mut self, seq: &Sequence, index: usize, decimation: u64) -> Result<Option<FeatureFrame>, EstimatorError> {
        let frame = &seq.frames[index];
        match self {
            FrontEnd::Of { emulator, tracker } => {
                let flow = match emulator {
                    Some(e) => e.process_frame(&frame.image)?.flow,
                    None => seq.flow.get(&frame.frame_id).cloned().unwrap_or_default(),
                };
                tracker.update(frame.frame_id, &flow)?;
                Ok(tracker.emit_feature_frame(frame.frame_id, decimation)?)
            }
            FrontEnd::Host(h) => {
                h.process_frame(frame.frame_id, &frame.image)?;
                Ok(h.emit_feature_frame(frame.frame_id, decimation))
            }
        }
    }
}

/// Ground-truth state at `t`; velocity by central difference.
fn bootstrap_state(seq: &Sequence, t: f64) -> Result<NavState, EstimatorError> {
    let tol = seq.manifest.imu_period().max(1e-3);
    let gt = &seq.ground_truth;
    let i = gt.partition_point(|p| p.t < t);
    let pick = [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter(|&j| j < gt.len())
        .min_by(|&a, &b| (gt[a].t - t).abs().total_cmp(&(gt[b].t - t).abs()));
    let Some(j) = pick.filter(|&j| (gt[j].t - t).abs() <= tol) else {
        return Err(EstimatorError::Initialization(format!(
            "no ground-truth pose within {tol} s of t = {t}; bootstrap needs ground truth"
        )));
    };
    let (a, b) = (j.saturating_sub(1), (j + 1).min(gt.len() - 1));
    if a == b {
        return Err(EstimatorError::Initialization("ground truth too short for a velocity estimate".into()));
    }
    let velocity = (gt[b].position - gt[a].position) / (gt[b].t - gt[a].t);
    Ok(NavState {
        rotation: gt[j].orientation,
        velocity,
        position: gt[j].position,
    })
}

/// Runs a front-end and the sliding-window estimator over a sequence. The
/// first two ticks take their state from ground truth.
pub fn run_odometry(seq: &Sequence, kind: FrontEndKind, config: &OdometryConfig) -> Result<OdometryResult, EstimatorError> {
    if config.decimation == 0 {
        return Err(EstimatorError::Precondition("decimation must be >= 1".into()));
    }
    let m = &seq.manifest;
    let mut est_cfg = config.estimator;
    est_cfg.focal = m.camera.intrinsics.fx;
    let gravity = m.gravity_vector();
    let mut window = SlidingWindow::new(est_cfg, m.extrinsics, gravity);
    let mut front = FrontEnd::new(seq, kind, config)?;
    let (imu_t0, imu_t1) = match (seq.imu.first(), seq.imu.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(EstimatorError::Initialization("sequence has no IMU samples".into())),
    };

    let mut result = OdometryResult {
        trajectory: Vec::new(),
        diagnostics: Vec::new(),
        frontend_ms: Vec::with_capacity(seq.frames.len()),
        cost_histories: Vec::new(),
    };
    let mut ticks = 0usize;
    for index in 0..seq.frames.len() {
        let start = Instant::now();
        let emitted = front.step(seq, index, config.decimation)?;
        result.frontend_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let Some(ff) = emitted else { continue };
        let t = seq.frames[index].t.clamp(imu_t0, imu_t1);
        let start = Instant::now();
        let observations: BTreeMap<u64, Vec3> = ff.observations.iter().map(|o| (o.track_id, o.bearing)).collect();

        let (state, preint) = match window.newest() {
            None => (bootstrap_state(seq, t)?, None),
            Some(prev) => {
                let samples = imu_window(&seq.imu, prev.t, t)?;
                let delta = integrate(&samples, &config.bias, &m.imu_noise, m.imu_period())?;
                let state = if ticks < 2 {
                    bootstrap_state(seq, t)?
                } else {
                    predict(&prev.state, &delta, &gravity)
                };
                (state, Some(delta))
            }
        };
        window.push_frame(WindowFrame {
            frame_id: ff.frame_id,
            t,
            state,
            observations,
            preint,
        });
        ticks += 1;
        window.triangulate_pending();

        let mut diag = TickDiagnostics {
            frame_id: ff.frame_id,
            t,
            initial_cost: 0.0,
            final_cost: 0.0,
            iterations: 0,
            landmarks: window.landmarks().len(),
            observations: ff.observations.len(),
            estimator_ms: 0.0,
        };
        let mut history = Vec::new();
        if window.frames().len() >= 2 && !window.landmarks().is_empty() {
            let report = window.optimize()?;
            diag.initial_cost = report.initial_cost;
            diag.final_cost = report.final_cost;
            diag.iterations = report.iterations;
            history = report.cost_history;
            if window.prune_outliers() > 0 && !window.landmarks().is_empty() {
                let again = window.optimize()?;
                diag.final_cost = again.final_cost;
                diag.iterations += again.iterations;
                history.extend(again.cost_history.into_iter().skip(1));
            }
            diag.landmarks = window.landmarks().len();
        }
        diag.estimator_ms = start.elapsed().as_secs_f64() * 1e3;
        let newest = window.newest().expect("just pushed");
        result.trajectory.push(StampedPose {
            t: seq.frames[index].t,
            position: newest.state.position,
            orientation: newest.state.rotation,
        });
        result.diagnostics.push(diag);
        result.cost_histories.push(history);
    }
    if result.trajectory.is_empty() {
        return Err(EstimatorError::Initialization("front-end emitted no estimator ticks".into()));
    }
    Ok(result)
}

/// Per-tick diagnostics as CSV.
pub fn write_diagnostics_csv<W: Write>(out: &mut W, diags: &[TickDiagnostics]) -> std::io::Result<()> {
    writeln!(out, "frame_id,t,initial_cost,final_cost,iterations,landmarks,observations,estimator_ms")?;
    for d in diags {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            d.frame_id, d.t, d.initial_cost, d.final_cost, d.iterations, d.landmarks, d.observations, d.estimator_ms
        )?;
    }
    Ok(())
}
