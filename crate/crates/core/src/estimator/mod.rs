//! Sliding-window visual-inertial estimator: inverse-depth landmarks,
//! preintegrated IMU factors, Levenberg-Marquardt with a Huber loss and a
//! Schur complement over landmarks. The oldest frame's pose is held fixed
//! as the gauge; dropped frames leave no prior behind.

pub mod factors;
mod odometry;

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Extrinsics;
use crate::geometry::Vec3;
use crate::imu_preint::{NavState, PreintDelta};

pub use factors::{
    landmark_in_camera, preint_residual, reprojection_residual, retract, sqrt_information, tangent_basis,
    PreintJacobians, ReprojectionJacobians,
};
pub use odometry::{
    run_odometry, write_diagnostics_csv, FrontEndKind, OdometryConfig, OdometryResult, TickDiagnostics,
};

use factors::{Mat9, Vec9};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("non-finite {kind} residual ({detail})")]
    NonFinite { kind: &'static str, detail: String },
    #[error("cannot optimize: {0}")]
    Precondition(String),
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error(transparent)]
    Preint(#[from] crate::imu_preint::PreintError),
    #[error(transparent)]
    Tracker(#[from] crate::tracker::TrackerError),
    #[error(transparent)]
    HostTracker(#[from] crate::host_tracker::HostTrackerError),
    #[error(transparent)]
    Sensor(#[from] crate::sensor_emu::SensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub window_size: usize,
    /// Huber threshold in focal-scaled tangent units (about pixels).
    pub huber: f64,
    /// Focal length used to scale reprojection residuals.
    pub focal: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    /// Minimum ray angle for triangulation, degrees.
    pub min_parallax_deg: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Landmarks with a scaled residual above this after optimizing are dropped.
    pub outlier_threshold: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            huber: 1.5,
            focal: 460.0,
            max_iterations: 50,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            initial_lambda: 1e-4,
            min_parallax_deg: 0.5,
            min_depth: 0.1,
            max_depth: 200.0,
            outlier_threshold: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFrame {
    pub frame_id: u64,
    pub t: f64,
    pub state: NavState,
    /// Unit bearings keyed by track id.
    pub observations: BTreeMap<u64, Vec3>,
    /// Increment from the previous window frame; `None` for the first.
    pub preint: Option<PreintDelta>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub anchor_frame: u64,
    pub anchor_bearing: Vec3,
    pub inv_depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Linear solves attempted.
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl OptimizeReport {
    pub fn accepted_steps(&self) -> usize {
        self.cost_history.len() - 1
    }
}

/// Why a track could not be triangulated yet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Deferred {
    TooFewViews,
    LowParallax,
    BadDepth,
}

/// Camera pose `(R_wc, c)` of a body state.
fn camera_pose(s: &NavState, ext: &Extrinsics) -> (crate::geometry::Quat, Vec3) {
    (s.rotation * ext.rotation, s.rotation * ext.translation + s.position)
}

/// Linear multi-view triangulation. `views[0]` is the anchor; returns the
/// inverse distance along the anchor bearing.
pub fn triangulate(
    views: &[(NavState, Vec3)],
    ext: &Extrinsics,
    min_parallax_deg: f64,
    depth_range: (f64, f64),
) -> Result<f64, Deferred> {
    if views.len() < 2 {
        return Err(Deferred::TooFewViews);
    }
    let rays: Vec<(Vec3, Vec3)> = views
        .iter()
        .map(|(s, b)| {
            let (r, c) = camera_pose(s, ext);
            (c, r * b)
        })
        .collect();
    let d0 = rays[0].1;
    let parallax = rays[1..].iter().map(|(_, d)| d0.angle(d)).fold(0.0, f64::max);
    if parallax.to_degrees() < min_parallax_deg {
        return Err(Deferred::LowParallax);
    }
    let mut a = crate::geometry::Mat3::zeros();
    let mut rhs = Vec3::zeros();
    for (c, d) in &rays {
        let p = crate::geometry::Mat3::identity() - d * d.transpose();
        a += p;
        rhs += p * c;
    }
    let x = a.lu().solve(&rhs).ok_or(Deferred::LowParallax)?;
    let depth = d0.dot(&(x - rays[0].0));
    if !(depth >= depth_range.0 && depth <= depth_range.1) {
        return Err(Deferred::BadDepth);
    }
    Ok(1.0 / depth)
}

/// Huber cost `rho(s)` of a squared norm and the IRLS weight.
fn huber(s: f64, delta: f64) -> (f64, f64) {
    if s <= delta * delta {
        (s, 1.0)
    } else {
        let n = s.sqrt();
        (2.0 * delta * n - delta * delta, delta / n)
    }
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub config: EstimatorConfig,
    pub extrinsics: Extrinsics,
    pub gravity: Vec3,
    frames: VecDeque<WindowFrame>,
    landmarks: BTreeMap<u64, Landmark>,
}

impl SlidingWindow {
    pub fn new(config: EstimatorConfig, extrinsics: Extrinsics, gravity: Vec3) -> Self {
        Self {
            config,
            extrinsics,
            gravity,
            frames: VecDeque::new(),
            landmarks: BTreeMap::new(),
        }
    }

    pub fn frames(&self) -> &VecDeque<WindowFrame> {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut VecDeque<WindowFrame> {
        &mut self.frames
    }

    pub fn landmarks(&self) -> &BTreeMap<u64, Landmark> {
        &self.landmarks
    }

    pub fn landmarks_mut(&mut self) -> &mut BTreeMap<u64, Landmark> {
        &mut self.landmarks
    }

    pub fn newest(&self) -> Option<&WindowFrame> {
        self.frames.back()
    }

    fn index_of(&self, frame_id: u64) -> Option<usize> {
        self.frames.iter().position(|f| f.frame_id == frame_id)
    }

    /// Appends a frame, sliding out the oldest one first if the window is full.
    pub fn push_frame(&mut self, frame: WindowFrame) -> Option<WindowFrame> {
        let dropped = if self.frames.len() >= self.config.window_size {
            self.slide_window()
        } else {
            None
        };
        self.frames.push_back(frame);
        dropped
    }

    /// Drops the oldest frame. Landmarks anchored there move to their next
    /// observing frame with the same 3D point; landmarks left with fewer
    /// than two observations are removed.
    pub fn slide_window(&mut self) -> Option<WindowFrame> {
        let old = self.frames.pop_front()?;
        if let Some(first) = self.frames.front_mut() {
            first.preint = None;
        }
        let ext = self.extrinsics;
        let ids: Vec<u64> = self.landmarks.keys().copied().collect();
        for id in ids {
            let obs: Vec<usize> = (0..self.frames.len())
                .filter(|&k| self.frames[k].observations.contains_key(&id))
                .collect();
            if obs.len() < 2 {
                self.landmarks.remove(&id);
                continue;
            }
            let lm = self.landmarks[&id];
            if lm.anchor_frame != old.frame_id {
                continue;
            }
            let target = &self.frames[obs[0]];
            let x = landmark_in_camera(&old.state, &target.state, &ext, &lm.anchor_bearing, lm.inv_depth);
            let range = x.norm();
            if !(range > 0.0) || x.dot(&target.observations[&id]) <= 0.0 {
                self.landmarks.remove(&id);
                continue;
            }
            self.landmarks.insert(
                id,
                Landmark {
                    anchor_frame: target.frame_id,
                    anchor_bearing: x / range,
                    inv_depth: 1.0 / range,
                },
            );
        }
        Some(old)
    }

    /// Triangulates tracks seen in at least two window frames that have no
    /// landmark yet. Returns the number created.
    pub fn triangulate_pending(&mut self) -> usize {
        let mut seen: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (k, f) in self.frames.iter().enumerate() {
            for id in f.observations.keys() {
                if !self.landmarks.contains_key(id) {
                    seen.entry(*id).or_default().push(k);
                }
            }
        }
        let mut created = 0;
        for (id, ks) in seen {
            if ks.len() < 2 {
                continue;
            }
            let views: Vec<(NavState, Vec3)> = ks
                .iter()
                .map(|&k| (self.frames[k].state, self.frames[k].observations[&id]))
                .collect();
            let c = &self.config;
            if let Ok(rho) = triangulate(&views, &self.extrinsics, c.min_parallax_deg, (c.min_depth, c.max_depth)) {
                self.landmarks.insert(
                    id,
                    Landmark {
                        anchor_frame: self.frames[ks[0]].frame_id,
                        anchor_bearing: views[0].1,
                        inv_depth: rho,
                    },
                );
                created += 1;
            }
        }
        created
    }

    /// Observations used as reprojection residuals: `(track, frame index)`
    /// for every non-anchor frame observing a landmark.
    fn visual_terms(&self) -> Vec<(u64, usize, usize)> {
        let mut out = Vec::new();
        for (id, lm) in &self.landmarks {
            let Some(a) = self.index_of(lm.anchor_frame) else { continue };
            for (k, f) in self.frames.iter().enumerate() {
                if k != a && f.observations.contains_key(id) {
                    out.push((*id, a, k));
                }
            }
        }
        out
    }

    /// Total robust cost `0.5 * (sum rho(|r_vis|^2) + sum |r_imu|^2)`.
    pub fn cost(&self) -> Result<f64, EstimatorError> {
        self.cost_of(&self.frames, &self.landmarks)
    }

    fn cost_of(&self, frames: &VecDeque<WindowFrame>, landmarks: &BTreeMap<u64, Landmark>) -> Result<f64, EstimatorError> {
        let c = &self.config;
        let mut total = 0.0;
        for (id, lm) in landmarks {
            let Some(a) = frames.iter().position(|f| f.frame_id == lm.anchor_frame) else { continue };
            for (k, f) in frames.iter().enumerate() {
                let Some(obs) = f.observations.get(id) else { continue };
                if k == a {
                    continue;
                }
                let x = landmark_in_camera(&frames[a].state, &f.state, &self.extrinsics, &lm.anchor_bearing, lm.inv_depth);
                let r = tangent_basis(obs) * (x.normalize() - obs) * c.focal;
                let s = r.norm_squared();
                if !s.is_finite() {
                    return Err(EstimatorError::NonFinite {
                        kind: "reprojection",
                        detail: format!("track {id}, frame {}", f.frame_id),
                    });
                }
                total += 0.5 * huber(s, c.huber).0;
            }
        }
        for k in 1..frames.len() {
            let Some(delta) = &frames[k].preint else { continue };
            let (r, _) = preint_residual(&frames[k - 1].state, &frames[k].state, delta, &self.gravity);
            let w = sqrt_information(&delta.covariance) * r;
            let s = w.norm_squared();
            if !s.is_finite() {
                return Err(EstimatorError::NonFinite {
                    kind: "preintegration",
                    detail: format!("frames {} -> {}", frames[k - 1].frame_id, frames[k].frame_id),
                });
            }
            total += 0.5 * s;
        }
        Ok(total)
    }

    /// Scaled reprojection residual norms per landmark (max over frames).
    pub fn landmark_errors(&self) -> BTreeMap<u64, f64> {
        let mut out: BTreeMap<u64, f64> = BTreeMap::new();
        for (id, a, k) in self.visual_terms() {
            let lm = &self.landmarks[&id];
            let f = &self.frames[k];
            let obs = &f.observations[&id];
            let x = landmark_in_camera(&self.frames[a].state, &f.state, &self.extrinsics, &lm.anchor_bearing, lm.inv_depth);
            let e = (tangent_basis(obs) * (x.normalize() - obs)).norm() * self.config.focal;
            let m = out.entry(id).or_insert(0.0);
            *m = m.max(e);
        }
        out
    }

    /// Removes landmarks with large residuals or implausible depth.
    pub fn prune_outliers(&mut self) -> usize {
        let errs = self.landmark_errors();
        let c = self.config;
        let before = self.landmarks.len();
        self.landmarks.retain(|id, lm| {
            let depth = 1.0 / lm.inv_depth;
            let e = errs.get(id).copied().unwrap_or(0.0);
            e <= c.outlier_threshold && depth >= c.min_depth && depth <= c.max_depth
        });
        before - self.landmarks.len()
    }

    /// Levenberg-Marquardt over all frame states (oldest pose fixed) and
    /// inverse depths. Accepted steps strictly decrease the robust cost.
    pub fn optimize(&mut self) -> Result<OptimizeReport, EstimatorError> {
        let n = self.frames.len();
        if n < 2 {
            return Err(EstimatorError::Precondition(format!("{n} frame(s) in window")));
        }
        if self.landmarks.is_empty() {
            return Err(EstimatorError::Precondition("no landmarks".into()));
        }
        if let Some(k) = (1..n).find(|&k| self.frames[k].preint.is_none()) {
            return Err(EstimatorError::Precondition(format!(
                "no preintegration factor into frame {}",
                self.frames[k].frame_id
            )));
        }
        let c = self.config;
        let mut cost = self.cost()?;
        let mut report = OptimizeReport {
            initial_cost: cost,
            final_cost: cost,
            iterations: 0,
            cost_history: vec![cost],
        };
        let mut lambda = c.initial_lambda;
        let lm_ids: Vec<u64> = self.landmarks.keys().copied().collect();
        'outer: while report.iterations < c.max_iterations {
            let sys = self.build_system(&lm_ids);
            let grad_inf = sys.gp.amax().max(sys.gl.amax());
            if grad_inf < c.gradient_tolerance {
                break;
            }
            loop {
                if report.iterations >= c.max_iterations {
                    break 'outer;
                }
                report.iterations += 1;
                let Some((dp, dl)) = sys.solve(lambda) else {
                    lambda *= 10.0;
                    continue;
                };
                let step = (dp.norm_squared() + dl.norm_squared()).sqrt();
                if step < c.step_tolerance {
                    break 'outer;
                }
                let (frames, landmarks, ok) = self.apply_step(&lm_ids, &dp, &dl);
                let new_cost = if ok { self.cost_of(&frames, &landmarks).unwrap_or(f64::INFINITY) } else { f64::INFINITY };
                if new_cost < cost {
                    self.frames = frames;
                    self.landmarks = landmarks;
                    cost = new_cost;
                    report.cost_history.push(cost);
                    lambda = (lambda / 3.0).max(1e-12);
                    break;
                }
                lambda *= 4.0;
                if lambda > 1e16 {
                    break 'outer;
                }
            }
        }
        report.final_cost = cost;
        Ok(report)
    }

    fn apply_step(
        &self,
        lm_ids: &[u64],
        dp: &DVector<f64>,
        dl: &DVector<f64>,
    ) -> (VecDeque<WindowFrame>, BTreeMap<u64, Landmark>, bool) {
        let mut frames = self.frames.clone();
        for (k, f) in frames.iter_mut().enumerate() {
            let d = Vec9::from_iterator(dp.rows(9 * k, 9).iter().copied());
            f.state = retract(&f.state, &d);
        }
        let mut landmarks = self.landmarks.clone();
        let mut ok = true;
        for (i, id) in lm_ids.iter().enumerate() {
            let lm = landmarks.get_mut(id).expect("ids fixed during optimize");
            lm.inv_depth += dl[i];
            if !(lm.inv_depth > 0.0) {
                ok = false;
            }
        }
        (frames, landmarks, ok)
    }

    fn build_system(&self, lm_ids: &[u64]) -> NormalEquations {
        let n = self.frames.len();
        let dim = 9 * n;
        let c = &self.config;
        let mut hpp = DMatrix::<f64>::zeros(dim, dim);
        let mut gp = DVector::<f64>::zeros(dim);
        let mut hll = vec![0.0; lm_ids.len()];
        let mut gl = DVector::<f64>::zeros(lm_ids.len());
        let mut hpl = vec![DVector::<f64>::zeros(dim); lm_ids.len()];

        let fixed = |col: usize| col < 6;
        for (li, id) in lm_ids.iter().enumerate() {
            let lm = &self.landmarks[id];
            let Some(a) = self.index_of(lm.anchor_frame) else { continue };
            for (k, f) in self.frames.iter().enumerate() {
                let Some(obs) = f.observations.get(id) else { continue };
                if k == a {
                    continue;
                }
                let (r, j) = reprojection_residual(&self.frames[a].state, &f.state, &self.extrinsics, &lm.anchor_bearing, lm.inv_depth, obs);
                let r = r * c.focal;
                let (_, w) = huber(r.norm_squared(), c.huber);
                // Stack [anchor pose | target pose] columns into a 2 x dim sparse row set.
                let blocks = [(a, j.anchor * c.focal), (k, j.target * c.focal)];
                let jr = j.inv_depth * c.focal;
                for (fa, ja) in &blocks {
                    for (fb, jb) in &blocks {
                        let h = ja.transpose() * jb * w;
                        for u in 0..6 {
                            for v in 0..6 {
                                let (cu, cv) = (9 * fa + u, 9 * fb + v);
                                if !fixed(cu) && !fixed(cv) {
                                    hpp[(cu, cv)] += h[(u, v)];
                                }
                            }
                        }
                    }
                    let g = ja.transpose() * r * w;
                    let hl = ja.transpose() * jr * w;
                    for u in 0..6 {
                        let cu = 9 * fa + u;
                        if !fixed(cu) {
                            gp[cu] += g[u];
                            hpl[li][cu] += hl[u];
                        }
                    }
                }
                hll[li] += jr.norm_squared() * w;
                gl[li] += jr.dot(&r) * w;
            }
        }
        for k in 1..n {
            let delta = self.frames[k].preint.as_ref().expect("checked in optimize");
            let (r, j) = preint_residual(&self.frames[k - 1].state, &self.frames[k].state, delta, &self.gravity);
            let s = sqrt_information(&delta.covariance);
            let r = s * r;
            let blocks: [(usize, Mat9); 2] = [(k - 1, s * j.i), (k, s * j.j)];
            for (fa, ja) in &blocks {
                for (fb, jb) in &blocks {
                    let h = ja.transpose() * jb;
                    for u in 0..9 {
                        for v in 0..9 {
                            let (cu, cv) = (9 * fa + u, 9 * fb + v);
                            if !fixed(cu) && !fixed(cv) {
                                hpp[(cu, cv)] += h[(u, v)];
                            }
                        }
                    }
                }
                let g = ja.transpose() * r;
                for u in 0..9 {
                    let cu = 9 * fa + u;
                    if !fixed(cu) {
                        gp[cu] += g[u];
                    }
                }
            }
        }
        NormalEquations { hpp, gp, hll, gl, hpl }
    }
}

/// Gauss-Newton normal equations split into frame and landmark blocks.
struct NormalEquations {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<f64>,
    gl: DVector<f64>,
    hpl: Vec<DVector<f64>>,
}

impl NormalEquations {
    /// Solves the damped system `(H + lambda diag(H)) d = -g` by eliminating
    /// the (diagonal) landmark block.
    fn solve(&self, lambda: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let dim = self.gp.len();
        let mut s = self.hpp.clone();
        for i in 0..dim {
            let d = self.hpp[(i, i)];
            s[(i, i)] = if d > 0.0 { d * (1.0 + lambda) } else { 1.0 };
        }
        let mut rhs = -&self.gp;
        let hll: Vec<f64> = self.hll.iter().map(|h| (h * (1.0 + lambda)).max(1e-12)).collect();
        for (i, h) in self.hpl.iter().enumerate() {
            s.ger(-1.0 / hll[i], h, h, 1.0);
            rhs.axpy(self.gl[i] / hll[i], h, 1.0);
        }
        let dp = s.cholesky()?.solve(&rhs);
        let dl = DVector::from_iterator(
            self.hll.len(),
            (0..self.hll.len()).map(|i| (-self.gl[i] - self.hpl[i].dot(&dp)) / hll[i]),
        );
        Some((dp, dl))
    }
}
