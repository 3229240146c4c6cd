//! VIO sequences: frames, IMU samples, flow records, ground truth and the
//! calibration manifest, plus the on-disk layout and a synthetic generator.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraModel, Distortion, Intrinsics};
use crate::geometry::{Quat, Vec3};
use crate::image::{GrayImage, ImageError};
use crate::imu_preint::ImuNoise;
use crate::kv::{KeyValues, KvError};
use crate::sensor_emu::FlowVector;

pub use io::{
    load_sequence, read_pgm, read_tum, save_sequence, write_pgm, write_tum, FLOW_FILE,
    FRAMES_FILE, GROUND_TRUTH_FILE, IMU_FILE, MANIFEST_FILE,
};
pub use synth::{
    camera_pose, synthesize_sequence, Backdrop, NoiseSpec, SceneSpec, Signal, Sinusoid, SmoothTrajectory, SyntheticSetup,
    TrajectorySpec,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no manifest found at {0}")]
    MissingManifest(PathBuf),
    #[error("missing required file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}: timestamps not strictly increasing at rows {indices:?}")]
    NonMonotonic { file: String, indices: Vec<usize> },
    #[error("manifest: {0}")]
    Manifest(#[from] KvError),
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("frame {frame_id}: every scene point is behind the camera")]
    AllPointsBehind { frame_id: u64 },
}

impl DatasetError {
    /// True for problems with the input data rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, DatasetError::Io { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame, m/s^2.
    pub accel: Vec3,
    /// Angular rate in the body frame, rad/s.
    pub gyro: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub t: f64,
    pub image: GrayImage,
}

/// Timestamped body pose in the world frame (z up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub t: f64,
    pub position: Vec3,
    pub orientation: Quat,
}

pub type GroundTruthPose = StampedPose;

/// Camera-to-body transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub width: usize,
    pub height: usize,
    pub camera: CameraModel,
    pub extrinsics: Extrinsics,
    pub frame_rate: f64,
    pub imu_rate: f64,
    pub gravity: f64,
    pub imu_noise: ImuNoise,
    /// Mapping of flow-record pixels into frame pixels:
    /// `frame = origin + (flow + 0.5) * scale - 0.5`.
    pub flow_origin: (f64, f64),
    pub flow_scale: f64,
}

const MANIFEST_KEYS_DOC: &str = "\
# Sequence manifest. Units: pixels, seconds, metres, radians.
# width/height: frame size; fx fy cx cy: pinhole intrinsics;
# k1 k2 p1 p2: radial-tangential distortion;
# cam_to_body_q (w x y z) / cam_to_body_t: camera pose in the IMU body frame;
# frame_rate / imu_rate: Hz; gravity: m/s^2;
# accel_noise_density (m/s^2/sqrt(Hz)), gyro_noise_density (rad/s/sqrt(Hz));
# flow_origin / flow_scale: flow.csv pixel -> frame pixel mapping.
";

impl SequenceManifest {
    pub fn gravity_vector(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -self.gravity)
    }

    pub fn imu_period(&self) -> f64 {
        1.0 / self.imu_rate
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let k = &self.camera.intrinsics;
        if !(self.frame_rate > 0.0) {
            return Err(DatasetError::Invalid(format!("frame_rate {} must be > 0", self.frame_rate)));
        }
        if !(self.imu_rate >= self.frame_rate) {
            return Err(DatasetError::Invalid(format!(
                "imu_rate {} must be >= frame_rate {}",
                self.imu_rate, self.frame_rate
            )));
        }
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(DatasetError::Invalid(format!("fx, fy must be > 0 (got {}, {})", k.fx, k.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(DatasetError::Invalid("width and height must be > 0".into()));
        }
        if !(self.gravity > 0.0) {
            return Err(DatasetError::Invalid("gravity must be > 0".into()));
        }
        if !(self.flow_scale > 0.0) {
            return Err(DatasetError::Invalid("flow_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Parses the manifest text; unknown keys are returned, not rejected.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>), DatasetError> {
        let kv = KeyValues::parse(text)?;
        let q = kv.get_floats::<4>("cam_to_body_q")?.unwrap_or([1.0, 0.0, 0.0, 0.0]);
        let t = kv.get_floats::<3>("cam_to_body_t")?.unwrap_or([0.0; 3]);
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if (quat.norm() - 1.0).abs() > 1e-6 {
            return Err(DatasetError::Invalid(format!("cam_to_body_q is not unit: {q:?}")));
        }
        let origin = kv.get_floats::<2>("flow_origin")?.unwrap_or([0.0, 0.0]);
        let noise = ImuNoise::default();
        let m = Self {
            width: kv.require("width")?,
            height: kv.require("height")?,
            camera: CameraModel::new(
                Intrinsics {
                    fx: kv.require("fx")?,
                    fy: kv.require("fy")?,
                    cx: kv.require("cx")?,
                    cy: kv.require("cy")?,
                },
                Distortion {
                    k1: kv.get_or("k1", 0.0)?,
                    k2: kv.get_or("k2", 0.0)?,
                    p1: kv.get_or("p1", 0.0)?,
                    p2: kv.get_or("p2", 0.0)?,
                },
            ),
            extrinsics: Extrinsics {
                rotation: io::unit_quat(quat),
                translation: Vec3::new(t[0], t[1], t[2]),
            },
            frame_rate: kv.require("frame_rate")?,
            imu_rate: kv.require("imu_rate")?,
            gravity: kv.get_or("gravity", 9.81)?,
            imu_noise: ImuNoise {
                accel_noise_density: kv.get_or("accel_noise_density", noise.accel_noise_density)?,
                gyro_noise_density: kv.get_or("gyro_noise_density", noise.gyro_noise_density)?,
            },
            flow_origin: (origin[0], origin[1]),
            flow_scale: kv.get_or("flow_scale", 1.0)?,
        };
        m.validate()?;
        Ok((m, kv.unused_keys()))
    }

    pub fn to_text(&self) -> String {
        let k = &self.camera.intrinsics;
        let d = &self.camera.distortion;
        let q = self.extrinsics.rotation.quaternion();
        let t = &self.extrinsics.translation;
        let mut s = String::from(MANIFEST_KEYS_DOC);
        s += &format!("width = {}\nheight = {}\n", self.width, self.height);
        s += &format!("fx = {}\nfy = {}\ncx = {}\ncy = {}\n", k.fx, k.fy, k.cx, k.cy);
        s += &format!("k1 = {}\nk2 = {}\np1 = {}\np2 = {}\n", d.k1, d.k2, d.p1, d.p2);
        s += &format!("cam_to_body_q = {} {} {} {}\n", q.w, q.i, q.j, q.k);
        s += &format!("cam_to_body_t = {} {} {}\n", t.x, t.y, t.z);
        s += &format!("frame_rate = {}\nimu_rate = {}\ngravity = {}\n", self.frame_rate, self.imu_rate, self.gravity);
        s += &format!(
            "accel_noise_density = {}\ngyro_noise_density = {}\n",
            self.imu_noise.accel_noise_density, self.imu_noise.gyro_noise_density
        );
        s += &format!(
            "flow_origin = {} {}\nflow_scale = {}\n",
            self.flow_origin.0, self.flow_origin.1, self.flow_scale
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub manifest: SequenceManifest,
    pub frames: Vec<FrameRecord>,
    pub imu: Vec<ImuSample>,
    /// Flow records keyed by the frame they end in.
    pub flow: BTreeMap<u64, Vec<FlowVector>>,
    pub ground_truth: Vec<GroundTruthPose>,
}

/// Row indices (0-based) where `t[i] <= t[i-1]`.
pub(crate) fn non_monotonic_indices(ts: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut prev = f64::NEG_INFINITY;
    let mut bad = Vec::new();
    for (i, t) in ts.enumerate() {
        if !(t > prev) {
            bad.push(i);
        }
        prev = t;
    }
    bad
}

impl Sequence {
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.manifest.validate()?;
        let bad = non_monotonic_indices(self.imu.iter().map(|s| s.t));
        if !bad.is_empty() {
            return Err(DatasetError::NonMonotonic {
                file: IMU_FILE.into(),
                indices: bad,
            });
        }
        let bad = non_monotonic_indices(self.frames.iter().map(|f| f.t));
        if !bad.is_empty() {
            return Err(DatasetError::NonMonotonic {
                file: FRAMES_FILE.into(),
                indices: bad,
            });
        }
        if let Some(w) = self.frames.windows(2).position(|w| w[1].frame_id <= w[0].frame_id) {
            return Err(DatasetError::Invalid(format!("frame ids not increasing at row {}", w + 1)));
        }
        let bad = non_monotonic_indices(self.ground_truth.iter().map(|p| p.t));
        if !bad.is_empty() {
            return Err(DatasetError::NonMonotonic {
                file: GROUND_TRUTH_FILE.into(),
                indices: bad,
            });
        }
        for s in &self.imu {
            if !(s.accel.iter().chain(s.gyro.iter()).all(|v| v.is_finite()) && s.t.is_finite()) {
                return Err(DatasetError::Invalid(format!("non-finite IMU sample at t = {}", s.t)));
            }
        }
        for f in &self.frames {
            if f.image.width() != self.manifest.width || f.image.height() != self.manifest.height {
                return Err(DatasetError::Invalid(format!(
                    "frame {} is {}x{}, manifest says {}x{}",
                    f.frame_id,
                    f.image.width(),
                    f.image.height(),
                    self.manifest.width,
                    self.manifest.height
                )));
            }
        }
        if let (Some(first), Some(last)) = (self.imu.first(), self.imu.last()) {
            let tol = 0.5 * self.manifest.imu_period();
            for f in &self.frames {
                if f.t < first.t - tol || f.t > last.t + tol {
                    return Err(DatasetError::Invalid(format!(
                        "frame {} at t = {} lies outside the IMU span [{}, {}]",
                        f.frame_id, f.t, first.t, last.t
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frame_by_id(&self, id: u64) -> Option<&FrameRecord> {
        self.frames
            .binary_search_by_key(&id, |f| f.frame_id)
            .ok()
            .map(|i| &self.frames[i])
    }

    /// Ground-truth pose nearest to `t`, if within `max_dt`.
    pub fn ground_truth_at(&self, t: f64, max_dt: f64) -> Option<&GroundTruthPose> {
        nearest_by_time(&self.ground_truth, t, |p| p.t, max_dt)
    }

    /// Index of the IMU sample nearest to `t` within half an IMU period.
    pub fn imu_index_near(&self, t: f64) -> Option<usize> {
        let tol = 0.5 * self.manifest.imu_period();
        let i = self.imu.partition_point(|s| s.t < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < self.imu.len())
            .map(|j| (j, (self.imu[j].t - t).abs()))
            .filter(|&(_, d)| d <= tol)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j)
    }
}

/// Nearest element by timestamp in a time-sorted slice.
pub fn nearest_by_time<T>(items: &[T], t: f64, time: impl Fn(&T) -> f64, max_dt: f64) -> Option<&T> {
    let i = items.partition_point(|x| time(x) < t);
    let mut best: Option<(&T, f64)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(x) = items.get(j) {
            let d = (time(x) - t).abs();
            if d <= max_dt && best.is_none_or(|b| d < b.1) {
                best = Some((x, d));
            }
        }
    }
    best.map(|b| b.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest() -> SequenceManifest {
        SequenceManifest {
            width: 64,
            height: 48,
            camera: CameraModel::new(
                Intrinsics {
                    fx: 50.0,
                    fy: 50.0,
                    cx: 32.0,
                    cy: 24.0,
                },
                Distortion::default(),
            ),
            extrinsics: Extrinsics::default(),
            frame_rate: 20.0,
            imu_rate: 100.0,
            gravity: 9.81,
            imu_noise: ImuNoise::default(),
            flow_origin: (0.0, 0.0),
            flow_scale: 1.0,
        }
    }

    #[test]
    fn manifest_text_round_trip_with_unknown_key() {
        let m = manifest();
        let text = m.to_text() + "vendor = acme\n";
        let (back, unknown) = SequenceManifest::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(unknown, vec!["vendor".to_string()]);
    }

    #[test]
    fn manifest_invariants() {
        let mut m = manifest();
        m.imu_rate = 10.0;
        assert!(m.validate().is_err());
        let mut m = manifest();
        m.camera.intrinsics.fx = 0.0;
        assert!(m.validate().is_err());
        let mut m = manifest();
        m.frame_rate = 0.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn monotonic_check_reports_rows() {
        assert_eq!(non_monotonic_indices([0.0, 0.1, 0.1].into_iter()), vec![2]);
        assert_eq!(non_monotonic_indices([0.0, 0.2, 0.1, 0.3].into_iter()), vec![2]);
        assert!(non_monotonic_indices([0.0, 1.0].into_iter()).is_empty());
    }

    #[test]
    fn nearest_lookup() {
        let ts = [0.0, 0.01, 0.02, 0.03];
        assert_eq!(nearest_by_time(&ts, 0.014, |t| *t, 0.005), Some(&0.01));
        assert_eq!(nearest_by_time(&ts, 0.016, |t| *t, 0.005), Some(&0.02));
        assert_eq!(nearest_by_time(&ts, 0.5, |t| *t, 0.005), None);
    }
}
