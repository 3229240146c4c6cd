//! Baseline host-side front-end: Shi-Tomasi corners, pyramidal
//! Lucas-Kanade tracking and fundamental-matrix RANSAC.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::geometry::{Mat3, Vec3};
use crate::image::GrayImage;
use crate::tracker::{FeatureFrame, FeatureObservation};

#[derive(Debug, Error, PartialEq)]
pub enum HostTrackerError {
    #[error("need at least 8 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("point lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("frame {got} does not follow frame {last}")]
    FrameGap { last: u64, got: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerCandidate {
    pub x: f64,
    pub y: f64,
    pub shi_tomasi_score: f64,
}

/// Row-major `f32` image used for gradients and pyramids.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample; the caller keeps `(x, y)` inside `[0, w-1] x [0, h-1]`.
    #[inline]
    fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = (x.floor() as usize).min(self.width - 2);
        let y0 = (y.floor() as usize).min(self.height - 2);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let i = y0 * self.width + x0;
        let d = &self.data;
        let top = d[i] + (d[i + 1] - d[i]) * fx;
        let bot = d[i + self.width] + (d[i + self.width + 1] - d[i + self.width]) * fx;
        (top + (bot - top) * fy) as f64
    }

    /// 5-tap binomial blur followed by 2x decimation.
    fn pyr_down(&self) -> FloatImage {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.width, self.height);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, c) in K.iter().enumerate() {
                    s += c * self.at(clamp(x as isize + k as isize - 2, w), y);
                }
                tmp[y * w + x] = s;
            }
        }
        let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
        let mut data = vec![0f32; nw * nh];
        for y in 0..nh {
            for x in 0..nw {
                let mut s = 0.0;
                for (k, c) in K.iter().enumerate() {
                    s += c * tmp[clamp(2 * y as isize + k as isize - 2, h) * w + 2 * x];
                }
                data[y * nw + x] = s;
            }
        }
        FloatImage {
            width: nw,
            height: nh,
            data,
        }
    }

    /// Central-difference gradients (zero on the outer ring).
    fn gradients(&self) -> (FloatImage, FloatImage) {
        let (w, h) = (self.width, self.height);
        let mut gx = vec![0f32; w * h];
        let mut gy = vec![0f32; w * h];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                gx[y * w + x] = 0.5 * (self.at(x + 1, y) - self.at(x - 1, y));
                gy[y * w + x] = 0.5 * (self.at(x, y + 1) - self.at(x, y - 1));
            }
        }
        let mk = |data| FloatImage {
            width: w,
            height: h,
            data,
        };
        (mk(gx), mk(gy))
    }
}

/// Image pyramid with per-level gradients. Level 0 is full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<(FloatImage, FloatImage, FloatImage)>,
}

impl Pyramid {
    /// Builds up to `levels` levels, stopping before a level drops below 8 px.
    pub fn new(img: &GrayImage, levels: usize) -> Self {
        let mut out = Vec::new();
        let mut cur = FloatImage::from_gray(img);
        for l in 0..levels.max(1) {
            if l > 0 {
                let next = cur.pyr_down();
                if next.width < 8 || next.height < 8 {
                    break;
                }
                cur = next;
            }
            let (gx, gy) = cur.gradients();
            out.push((cur.clone(), gx, gy));
        }
        Self { levels: out }
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn width(&self) -> usize {
        self.levels[0].0.width
    }

    pub fn height(&self) -> usize {
        self.levels[0].0.height
    }
}

/// Shi-Tomasi detector. Scores are the minimum eigenvalue of the 3x3-summed
/// Sobel structure tensor; local maxima above `quality_ratio * max` are
/// taken greedily in descending score, at least `min_distance` apart.
pub fn detect_shi_tomasi(
    img: &GrayImage,
    max_corners: usize,
    quality_ratio: f64,
    min_distance: f64,
) -> Vec<CornerCandidate> {
    detect_shi_tomasi_excluding(img, max_corners, quality_ratio, min_distance, &[])
}

/// As [`detect_shi_tomasi`], also keeping `min_distance` from `existing`.
pub fn detect_shi_tomasi_excluding(
    img: &GrayImage,
    max_corners: usize,
    quality_ratio: f64,
    min_distance: f64,
    existing: &[(f64, f64)],
) -> Vec<CornerCandidate> {
    let (w, h) = (img.width(), img.height());
    if w < 5 || h < 5 || max_corners == 0 {
        return Vec::new();
    }
    let score = min_eigen_map(img);
    let max = score.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let floor = (quality_ratio * max).max(f64::MIN_POSITIVE);
    let s = |x: usize, y: usize| score[y * w + x];

    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let v = s(x, y);
            if v < floor {
                continue;
            }
            let is_max = (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| s(xx, yy) <= v));
            if is_max {
                cands.push((v, x, y));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));

    let mut grid = SpacingGrid::new(w, h, min_distance);
    for &(x, y) in existing {
        grid.insert(x, y);
    }
    let mut out = Vec::new();
    for (v, x, y) in cands {
        if out.len() >= max_corners {
            break;
        }
        let (fx, fy) = (x as f64, y as f64);
        if !grid.is_free(fx, fy) {
            continue;
        }
        grid.insert(fx, fy);
        let dx = parabolic_offset(s(x - 1, y), v, s(x + 1, y));
        let dy = parabolic_offset(s(x, y - 1), v, s(x, y + 1));
        out.push(CornerCandidate {
            x: fx + dx,
            y: fy + dy,
            shi_tomasi_score: v,
        });
    }
    out
}

fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
}

fn min_eigen_map(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let p = |x: usize, y: usize| img.get(x, y) as f64;
    let mut xx = vec![0.0; w * h];
    let mut xy = vec![0.0; w * h];
    let mut yy = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (p(x + 1, y - 1) + 2.0 * p(x + 1, y) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2.0 * p(x - 1, y) + p(x - 1, y + 1));
            let gy = (p(x - 1, y + 1) + 2.0 * p(x, y + 1) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2.0 * p(x, y - 1) + p(x + 1, y - 1));
            let (gx, gy) = (gx / 8.0, gy / 8.0);
            let i = y * w + x;
            xx[i] = gx * gx;
            xy[i] = gx * gy;
            yy[i] = gy * gy;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy_ in y - 1..=y + 1 {
                for xx_ in x - 1..=x + 1 {
                    let i = yy_ * w + xx_;
                    a += xx[i];
                    b += xy[i];
                    c += yy[i];
                }
            }
            let half = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            out[y * w + x] = (half - disc).max(0.0);
        }
    }
    out
}

/// Bucketed occupancy for minimum-distance checks.
struct SpacingGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    min_d2: f64,
    cells: Vec<Vec<(f64, f64)>>,
}

impl SpacingGrid {
    fn new(w: usize, h: usize, min_distance: f64) -> Self {
        let cell = min_distance.max(1.0);
        let cols = (w as f64 / cell).ceil() as usize + 1;
        let rows = (h as f64 / cell).ceil() as usize + 1;
        Self {
            cell,
            cols,
            rows,
            min_d2: min_distance.max(0.0).powi(2),
            cells: vec![Vec::new(); cols * rows],
        }
    }

    fn index(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = ((x / self.cell).floor().max(0.0) as usize).min(self.cols - 1);
        let cy = ((y / self.cell).floor().max(0.0) as usize).min(self.rows - 1);
        (cx, cy)
    }

    fn is_free(&self, x: f64, y: f64) -> bool {
        if self.min_d2 == 0.0 {
            return true;
        }
        let (cx, cy) = self.index(x, y);
        for gy in cy.saturating_sub(1)..=(cy + 1).min(self.rows - 1) {
            for gx in cx.saturating_sub(1)..=(cx + 1).min(self.cols - 1) {
                for &(px, py) in &self.cells[gy * self.cols + gx] {
                    if (px - x).powi(2) + (py - y).powi(2) < self.min_d2 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, x: f64, y: f64) {
        let (cx, cy) = self.index(x, y);
        self.cells[cy * self.cols + cx].push((x, y));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KltConfig {
    /// Odd window side, pixels.
    pub window: usize,
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Stop when the update is below this many pixels.
    pub epsilon: f64,
    /// Mean absolute intensity residual above which a track fails.
    pub max_residual: f64,
    /// Minimum eigenvalue of the per-pixel averaged gradient matrix.
    pub min_eigen: f64,
}

impl Default for KltConfig {
    fn default() -> Self {
        Self {
            window: 21,
            pyramid_levels: 3,
            max_iterations: 30,
            epsilon: 0.01,
            max_residual: 12.0,
            min_eigen: 1e-3,
        }
    }
}

/// Tracks `points` from `prev` to `curr` with translation-only pyramidal
/// Lucas-Kanade. Returns the new positions and per-point success flags.
pub fn track_photometric(
    prev: &GrayImage,
    curr: &GrayImage,
    points: &[(f64, f64)],
    config: &KltConfig,
) -> (Vec<(f64, f64)>, Vec<bool>) {
    let a = Pyramid::new(prev, config.pyramid_levels);
    let b = Pyramid::new(curr, config.pyramid_levels);
    track_pyramids(&a, &b, points, config)
}

/// [`track_photometric`] on prebuilt pyramids.
pub fn track_pyramids(
    prev: &Pyramid,
    curr: &Pyramid,
    points: &[(f64, f64)],
    config: &KltConfig,
) -> (Vec<(f64, f64)>, Vec<bool>) {
    let mut out = Vec::with_capacity(points.len());
    let mut status = Vec::with_capacity(points.len());
    for &p in points {
        match track_point(prev, curr, p, config) {
            Some(q) => {
                out.push(q);
                status.push(true);
            }
            None => {
                out.push(p);
                status.push(false);
            }
        }
    }
    (out, status)
}

fn inside(img: &FloatImage, x: f64, y: f64, margin: f64) -> bool {
    x >= margin && y >= margin && x <= img.width as f64 - 1.0 - margin && y <= img.height as f64 - 1.0 - margin
}

fn track_point(prev: &Pyramid, curr: &Pyramid, p: (f64, f64), cfg: &KltConfig) -> Option<(f64, f64)> {
    let half = (cfg.window / 2) as isize;
    let margin = half as f64 + 1.0;
    if !inside(&prev.levels[0].0, p.0, p.1, margin) {
        return None;
    }
    let n = (2 * half + 1).pow(2) as usize;
    let levels = prev.levels.len().min(curr.levels.len());
    let mut tmpl = vec![0.0; n];
    let mut grad = vec![(0.0, 0.0); n];
    let mut g = (0.0, 0.0);
    let mut residual = f64::INFINITY;
    for l in (0..levels).rev() {
        let scale = (1u32 << l) as f64;
        let (img_a, gx, gy) = &prev.levels[l];
        let img_b = &curr.levels[l].0;
        let (px, py) = (p.0 / scale, p.1 / scale);
        if !inside(img_a, px, py, margin) {
            // Too close to the border at this level; pass the guess down.
            g = (2.0 * g.0, 2.0 * g.1);
            continue;
        }
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        let mut k = 0;
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = (px + dx as f64, py + dy as f64);
                tmpl[k] = img_a.sample(x, y);
                let gr = (gx.sample(x, y), gy.sample(x, y));
                grad[k] = gr;
                a += gr.0 * gr.0;
                b += gr.0 * gr.1;
                c += gr.1 * gr.1;
                k += 1;
            }
        }
        let det = a * c - b * b;
        let min_eig = 0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt();
        if min_eig / (n as f64) < cfg.min_eigen || det.abs() < f64::MIN_POSITIVE {
            return None;
        }
        let mut d = (0.0, 0.0);
        for _ in 0..cfg.max_iterations {
            let (qx, qy) = (px + g.0 + d.0, py + g.1 + d.1);
            if !inside(img_b, qx, qy, margin) {
                return None;
            }
            let (mut bx, mut by) = (0.0, 0.0);
            let mut abs = 0.0;
            let mut k = 0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let e = tmpl[k] - img_b.sample(qx + dx as f64, qy + dy as f64);
                    bx += e * grad[k].0;
                    by += e * grad[k].1;
                    abs += e.abs();
                    k += 1;
                }
            }
            residual = abs / n as f64;
            let sx = (c * bx - b * by) / det;
            let sy = (a * by - b * bx) / det;
            d = (d.0 + sx, d.1 + sy);
            if sx * sx + sy * sy < cfg.epsilon * cfg.epsilon {
                break;
            }
        }
        g = (g.0 + d.0, g.1 + d.1);
        if l > 0 {
            g = (2.0 * g.0, 2.0 * g.1);
        }
    }
    let q = (p.0 + g.0, p.1 + g.1);
    if !inside(&curr.levels[0].0, q.0, q.1, margin) || !(residual <= cfg.max_residual) {
        return None;
    }
    Some(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 1.0,
            iterations: 200,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// Rank-2 fundamental matrix with unit Frobenius norm, `x1^T F x0 = 0`.
    pub fundamental: Mat3,
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Symmetric epipolar distance `sqrt((d(x1, F x0)^2 + d(x0, F^T x1)^2) / 2)`.
pub fn symmetric_epipolar_distance(f: &Mat3, x0: (f64, f64), x1: (f64, f64)) -> f64 {
    let a = Vec3::new(x0.0, x0.1, 1.0);
    let b = Vec3::new(x1.0, x1.1, 1.0);
    let l1 = f * a;
    let l0 = f.transpose() * b;
    let e = b.dot(&l1);
    let d1 = e * e / (l1.x * l1.x + l1.y * l1.y).max(f64::MIN_POSITIVE);
    let d0 = e * e / (l0.x * l0.x + l0.y * l0.y).max(f64::MIN_POSITIVE);
    (0.5 * (d0 + d1)).sqrt()
}

/// Hartley normalization: centroid to origin, mean distance sqrt(2).
fn normalizing_transform(pts: &[(f64, f64)]) -> Mat3 {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / n, my / n);
    let mean_d = pts.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Mat3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized eight-point estimate from `n >= 8` correspondences.
pub fn eight_point(x0: &[(f64, f64)], x1: &[(f64, f64)]) -> Result<Mat3, HostTrackerError> {
    if x0.len() != x1.len() {
        return Err(HostTrackerError::LengthMismatch(x0.len(), x1.len()));
    }
    if x0.len() < 8 {
        return Err(HostTrackerError::TooFewPoints(x0.len()));
    }
    let t0 = normalizing_transform(x0);
    let t1 = normalizing_transform(x1);
    // At least 9 rows so the SVD returns the full right basis.
    let rows = x0.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in x0.iter().zip(x1).enumerate() {
        let u = t0 * Vec3::new(p.0, p.1, 1.0);
        let v = t1 * Vec3::new(q.0, q.1, 1.0);
        let row = [
            v.x * u.x,
            v.x * u.y,
            v.x,
            v.y * u.x,
            v.y * u.y,
            v.y,
            u.x,
            u.y,
            1.0,
        ];
        for (j, r) in row.iter().enumerate() {
            a[(i, j)] = *r;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let f = Mat3::from_row_slice(vt.row(k).transpose().as_slice());
    let f = enforce_rank2(&f);
    let f = t1.transpose() * f * t0;
    Ok(f / f.norm())
}

fn enforce_rank2(f: &Mat3) -> Mat3 {
    let svd = f.svd(true, true);
    let mut s = svd.singular_values;
    let (k, _) = s.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("three values");
    s[k] = 0.0;
    svd.u.expect("U") * SMatrix::<f64, 3, 3>::from_diagonal(&s) * svd.v_t.expect("V^T")
}

fn inlier_mask(f: &Mat3, x0: &[(f64, f64)], x1: &[(f64, f64)], threshold: f64) -> Vec<bool> {
    x0.iter()
        .zip(x1)
        .map(|(a, b)| symmetric_epipolar_distance(f, *a, *b) <= threshold)
        .collect()
}

/// Seeded RANSAC over eight-point minimal samples, refit on the best
/// consensus set. The refit is kept only if it does not lose inliers.
pub fn ransac_fundamental(
    x0: &[(f64, f64)],
    x1: &[(f64, f64)],
    config: &RansacConfig,
) -> Result<RansacResult, HostTrackerError> {
    if x0.len() != x1.len() {
        return Err(HostTrackerError::LengthMismatch(x0.len(), x1.len()));
    }
    let n = x0.len();
    if n < 8 {
        return Err(HostTrackerError::TooFewPoints(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, Mat3, Vec<bool>)> = None;
    for _ in 0..config.iterations.max(1) {
        let idx = rand::seq::index::sample(&mut rng, n, 8);
        let s0: Vec<_> = idx.iter().map(|i| x0[i]).collect();
        let s1: Vec<_> = idx.iter().map(|i| x1[i]).collect();
        let Ok(f) = eight_point(&s0, &s1) else { continue };
        if !f.iter().all(|v| v.is_finite()) {
            continue;
        }
        let mask = inlier_mask(&f, x0, x1, config.threshold_px);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, f, mask));
        }
        if count == n {
            break;
        }
    }
    let (count, mut f, mut mask) = best.expect("at least one iteration");
    if count >= 8 {
        let i0: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| x0[i]).collect();
        let i1: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| x1[i]).collect();
        if let Ok(refit) = eight_point(&i0, &i1) {
            let m = inlier_mask(&refit, x0, x1, config.threshold_px);
            if m.iter().filter(|&&b| b).count() >= count {
                f = refit;
                mask = m;
            }
        }
    }
    Ok(RansacResult {
        fundamental: f,
        inliers: mask,
    })
}

type KeptPoint = (u64, (f64, f64), (f64, f64), (f64, f64));

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HostFrontEndConfig {
    pub max_features: usize,
    pub quality_ratio: f64,
    pub min_distance: f64,
    pub klt: KltConfig,
    pub ransac: RansacConfig,
}

impl Default for HostFrontEndConfig {
    fn default() -> Self {
        Self {
            max_features: 150,
            quality_ratio: 0.01,
            min_distance: 30.0,
            klt: KltConfig::default(),
            ransac: RansacConfig::default(),
        }
    }
}

/// One host-tracked feature with sub-pixel observations.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTrack {
    pub track_id: u64,
    /// `(frame_id, frame pixel, unit bearing)`
    pub observations: Vec<(u64, (f64, f64), Vec3)>,
}

/// Stateful baseline front-end: tracks the live features into each new
/// frame, rejects epipolar outliers, then tops up with fresh corners.
pub struct HostFrontEnd {
    config: HostFrontEndConfig,
    camera: CameraModel,
    previous: Option<(u64, Pyramid)>,
    tracks: BTreeMap<u64, HostTrack>,
    next_id: u64,
}

impl HostFrontEnd {
    pub fn new(camera: CameraModel, config: HostFrontEndConfig) -> Self {
        Self {
            config,
            camera,
            previous: None,
            tracks: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn tracks(&self) -> &BTreeMap<u64, HostTrack> {
        &self.tracks
    }

    /// Processes the next frame; returns the ids dropped this frame.
    pub fn process_frame(&mut self, frame_id: u64, img: &GrayImage) -> Result<Vec<u64>, HostTrackerError> {
        let pyr = Pyramid::new(img, self.config.klt.pyramid_levels);
        let mut dropped = Vec::new();
        if let Some((last, prev)) = self.previous.take() {
            if frame_id != last + 1 {
                return Err(HostTrackerError::FrameGap { last, got: frame_id });
            }
            let ids: Vec<u64> = self.tracks.keys().copied().collect();
            let pts: Vec<(f64, f64)> = ids.iter().map(|id| self.tracks[id].observations.last().expect("nonempty").1).collect();
            let (next, ok) = track_pyramids(&prev, &pyr, &pts, &self.config.klt);
            // (id, raw pixel, previous ideal pixel, current ideal pixel)
            let mut keep: Vec<KeptPoint> = Vec::new();
            for (k, id) in ids.iter().enumerate() {
                let ideal = (
                    self.camera.undistort_to_ideal_pixel(pts[k].0, pts[k].1),
                    self.camera.undistort_to_ideal_pixel(next[k].0, next[k].1),
                );
                match (ok[k], ideal) {
                    (true, (Ok(a), Ok(b))) => keep.push((*id, next[k], a, b)),
                    _ => dropped.push(*id),
                }
            }
            if keep.len() >= 8 {
                let a: Vec<_> = keep.iter().map(|k| k.2).collect();
                let b: Vec<_> = keep.iter().map(|k| k.3).collect();
                let r = ransac_fundamental(&a, &b, &self.config.ransac)?;
                let mut filtered = Vec::new();
                for (k, inl) in keep.into_iter().zip(r.inliers) {
                    if inl {
                        filtered.push(k);
                    } else {
                        dropped.push(k.0);
                    }
                }
                keep = filtered;
            }
            for id in &dropped {
                self.tracks.remove(id);
            }
            for (id, px, _, _) in keep {
                let bearing = self.bearing(px);
                match bearing {
                    Some(b) => self.tracks.get_mut(&id).expect("live").observations.push((frame_id, px, b)),
                    None => {
                        self.tracks.remove(&id);
                        dropped.push(id);
                    }
                }
            }
        }
        self.replenish(frame_id, img);
        self.previous = Some((frame_id, pyr));
        dropped.sort_unstable();
        Ok(dropped)
    }

    fn bearing(&self, px: (f64, f64)) -> Option<Vec3> {
        self.camera
            .undistort_pixel(px.0, px.1)
            .ok()
            .map(|(x, y)| Vec3::new(x, y, 1.0).normalize())
    }

    fn replenish(&mut self, frame_id: u64, img: &GrayImage) {
        let need = self.config.max_features.saturating_sub(self.tracks.len());
        if need == 0 {
            return;
        }
        let existing: Vec<(f64, f64)> = self.tracks.values().map(|t| t.observations.last().expect("nonempty").1).collect();
        let margin = (self.config.klt.window / 2) as f64 + 1.0;
        let (w, h) = (img.width() as f64, img.height() as f64);
        let corners = detect_shi_tomasi_excluding(
            img,
            usize::MAX,
            self.config.quality_ratio,
            self.config.min_distance,
            &existing,
        );
        let mut added = 0;
        for c in corners {
            if added == need {
                break;
            }
            if c.x < margin || c.y < margin || c.x > w - 1.0 - margin || c.y > h - 1.0 - margin {
                continue;
            }
            let Some(b) = self.bearing((c.x, c.y)) else { continue };
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.insert(
                id,
                HostTrack {
                    track_id: id,
                    observations: vec![(frame_id, (c.x, c.y), b)],
                },
            );
            added += 1;
        }
    }

    /// Tracks of length >= 2 observed in `frame_id`, when it is a multiple
    /// of `decimation`.
    pub fn emit_feature_frame(&self, frame_id: u64, decimation: u64) -> Option<FeatureFrame> {
        if decimation == 0 || !frame_id.is_multiple_of(decimation) {
            return None;
        }
        let observations = self
            .tracks
            .values()
            .filter(|t| t.observations.len() >= 2 && t.observations.last().expect("nonempty").0 == frame_id)
            .map(|t| {
                let (_, px, b) = *t.observations.last().expect("nonempty");
                FeatureObservation {
                    track_id: t.track_id,
                    bearing: b,
                    pixel: px,
                }
            })
            .collect();
        Some(FeatureFrame { frame_id, observations })
    }
}

/// Writes host tracks in the tracker CSV layout; Hamming is always 0.
pub fn write_host_track_csv<'a, W: Write>(
    out: &mut W,
    tracks: impl IntoIterator<Item = &'a HostTrack>,
) -> std::io::Result<()> {
    writeln!(out, "track_id,frame_id,x,y,ux,uy,uz,hamming")?;
    for t in tracks {
        for (f, px, b) in &t.observations {
            writeln!(out, "{},{},{},{},{},{},{},0", t.track_id, f, px.0, px.1, b.x, b.y, b.z)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Distortion, Intrinsics};
    use crate::geometry::{from_ypr, Quat};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn smooth_noise(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
        let mut cur = raw;
        for _ in 0..3 {
            let mut next = cur.clone();
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let mut s = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += cur[(y + dy - 1) * w + x + dx - 1];
                        }
                    }
                    next[y * w + x] = s / 9.0;
                }
            }
            cur = next;
        }
        // Stretch the contrast lost to blurring.
        GrayImage::from_fn(w, h, |x, y| (128.0 + 4.0 * (cur[y * w + x] - 127.5)).clamp(0.0, 255.0) as u8)
    }

    #[test]
    fn uniform_image_has_no_corners() {
        let img = GrayImage::filled(64, 64, 77);
        assert!(detect_shi_tomasi(&img, 100, 0.01, 5.0).is_empty());
    }

    #[test]
    fn checkerboard_corners_at_intersections() {
        let sq = 16;
        let img = GrayImage::from_fn(96, 96, |x, y| if (x / sq + y / sq) % 2 == 0 { 40 } else { 210 });
        let corners = detect_shi_tomasi(&img, 100, 0.1, 8.0);
        // Interior intersections sit between pixels 16k-1 and 16k.
        let expected: Vec<(f64, f64)> = (1..6)
            .flat_map(|i| (1..6).map(move |j| ((16 * i) as f64 - 0.5, (16 * j) as f64 - 0.5)))
            .collect();
        assert_eq!(corners.len(), expected.len());
        for c in &corners {
            let near = expected.iter().any(|e| (e.0 - c.x).abs() <= 1.0 && (e.1 - c.y).abs() <= 1.0);
            assert!(near, "stray corner {c:?}");
        }
        for e in &expected {
            assert!(corners.iter().any(|c| (e.0 - c.x).abs() <= 1.0 && (e.1 - c.y).abs() <= 1.0));
        }
    }

    #[test]
    fn diagonal_spacing_allows_one_corner() {
        let img = smooth_noise(64, 64, 3);
        let diag = (64.0f64 * 64.0 * 2.0).sqrt();
        assert!(detect_shi_tomasi(&img, 100, 0.01, diag).len() <= 1);
    }

    #[test]
    fn scores_descend_and_respect_spacing() {
        let img = smooth_noise(128, 96, 4);
        let c = detect_shi_tomasi(&img, 40, 0.01, 7.0);
        assert!(!c.is_empty() && c.len() <= 40);
        for w in c.windows(2) {
            assert!(w[0].shi_tomasi_score >= w[1].shi_tomasi_score);
        }
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                // Sub-pixel refinement moves each point by at most 0.5 px per axis.
                assert!(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() >= 7.0 - 1.5);
            }
        }
    }

    #[test]
    fn identical_frames_track_in_place() {
        let img = smooth_noise(96, 96, 5);
        let pts = vec![(40.0, 40.0), (50.5, 47.25), (60.0, 30.0)];
        let (out, ok) = track_photometric(&img, &img, &pts, &KltConfig::default());
        for (p, (q, s)) in pts.iter().zip(out.iter().zip(ok)) {
            assert!(s);
            assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
        }
    }

    #[test]
    fn shifted_frame_recovers_shift() {
        let img = smooth_noise(160, 120, 6);
        let moved = img.shifted(2, 0, 128);
        let pts: Vec<(f64, f64)> = (0..4).flat_map(|i| (0..3).map(move |j| (40.0 + 25.0 * i as f64, 35.0 + 25.0 * j as f64))).collect();
        let (out, ok) = track_photometric(&img, &moved, &pts, &KltConfig::default());
        for (p, (q, s)) in pts.iter().zip(out.iter().zip(ok)) {
            assert!(s, "lost {p:?}");
            assert!((q.0 - p.0 - 2.0).abs() <= 0.05 && (q.1 - p.1).abs() <= 0.05, "{p:?} -> {q:?}");
        }
    }

    #[test]
    fn border_points_fail() {
        let img = smooth_noise(96, 96, 7);
        let (_, ok) = track_photometric(&img, &img, &[(2.0, 40.0), (40.0, 94.0), (5.0, 5.0)], &KltConfig::default());
        assert_eq!(ok, vec![false, false, false]);
    }

    struct TwoView {
        x0: Vec<(f64, f64)>,
        x1: Vec<(f64, f64)>,
    }

    fn two_view(seed: u64, n: usize, baseline: Vec3, rot: Quat) -> TwoView {
        let k = Intrinsics {
            fx: 420.0,
            fy: 420.0,
            cx: 319.5,
            cy: 239.5,
        };
        let cam = CameraModel::new(k, Distortion::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut x0, mut x1) = (Vec::new(), Vec::new());
        while x0.len() < n {
            let p = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..9.0));
            // Second camera at `baseline`, rotated by `rot`: x1 = R^T (p - b).
            let q = rot.inverse() * (p - baseline);
            let (Ok(a), Ok(b)) = (cam.project(&p), cam.project(&q)) else { continue };
            x0.push(a);
            x1.push(b);
        }
        TwoView { x0, x1 }
    }

    #[test]
    fn clean_two_view_all_inliers() {
        let v = two_view(11, 60, Vec3::new(0.4, 0.05, 0.1), from_ypr(0.05, -0.02, 0.03));
        let r = ransac_fundamental(&v.x0, &v.x1, &RansacConfig::default()).unwrap();
        assert_eq!(r.inlier_count(), 60);
        for (a, b) in v.x0.iter().zip(&v.x1) {
            let e = Vec3::new(b.0, b.1, 1.0).dot(&(r.fundamental * Vec3::new(a.0, a.1, 1.0)));
            assert!(e.abs() < 1e-8, "{e}");
        }
        assert!(r.fundamental.determinant().abs() < 1e-10);
    }

    #[test]
    fn gross_outliers_rejected() {
        let mut injected = 0usize;
        let mut caught = 0usize;
        for trial in 0..100u64 {
            let mut v = two_view(100 + trial, 50, Vec3::new(0.3, -0.1, 0.05), from_ypr(0.03, 0.01, -0.02));
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let bad = rand::seq::index::sample(&mut rng, 50, 10);
            for i in bad.iter() {
                let r = rng.random_range(10.0..80.0);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                v.x1[i].0 += r * a.cos();
                v.x1[i].1 += r * a.sin();
            }
            let cfg = RansacConfig {
                seed: trial,
                ..RansacConfig::default()
            };
            let res = ransac_fundamental(&v.x0, &v.x1, &cfg).unwrap();
            injected += 10;
            caught += bad.iter().filter(|&i| !res.inliers[i]).count();
            for (k, &inl) in res.inliers.iter().enumerate() {
                if inl {
                    assert!(symmetric_epipolar_distance(&res.fundamental, v.x0[k], v.x1[k]) <= 1.0);
                }
            }
        }
        assert!(caught as f64 >= 0.95 * injected as f64, "{caught}/{injected}");
    }

    #[test]
    fn pure_rotation_keeps_all_points() {
        let v = two_view(21, 40, Vec3::zeros(), from_ypr(0.1, 0.02, -0.03));
        let r = ransac_fundamental(&v.x0, &v.x1, &RansacConfig::default()).unwrap();
        assert_eq!(r.inlier_count(), 40);
    }

    #[test]
    fn ransac_is_deterministic_and_needs_eight() {
        let v = two_view(31, 30, Vec3::new(0.2, 0.0, 0.0), Quat::identity());
        let mut x1 = v.x1.clone();
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in &mut x1 {
            p.0 += noise.sample(&mut rng);
            p.1 += noise.sample(&mut rng);
        }
        let a = ransac_fundamental(&v.x0, &x1, &RansacConfig::default()).unwrap();
        let b = ransac_fundamental(&v.x0, &x1, &RansacConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            ransac_fundamental(&v.x0[..7], &x1[..7], &RansacConfig::default()),
            Err(HostTrackerError::TooFewPoints(7))
        );
    }

    #[test]
    fn front_end_follows_a_pan() {
        let k = Intrinsics {
            fx: 200.0,
            fy: 200.0,
            cx: 79.5,
            cy: 59.5,
        };
        let cam = CameraModel::new(k, Distortion::default());
        let base = smooth_noise(220, 120, 8);
        let frames: Vec<GrayImage> = (0..5).map(|i| base.crop(2 * i, 0, 160, 120).unwrap()).collect();
        let cfg = HostFrontEndConfig {
            max_features: 20,
            min_distance: 10.0,
            ..HostFrontEndConfig::default()
        };
        let mut fe = HostFrontEnd::new(cam, cfg);
        for (i, f) in frames.iter().enumerate() {
            fe.process_frame(i as u64, f).unwrap();
        }
        let long: Vec<&HostTrack> = fe.tracks().values().filter(|t| t.observations.len() == 5).collect();
        assert!(long.len() >= 10, "{}", long.len());
        for t in long {
            for w in t.observations.windows(2) {
                assert!((w[1].1 .0 - w[0].1 .0 + 2.0).abs() < 0.1);
            }
        }
        let ff = fe.emit_feature_frame(4, 2).unwrap();
        assert!(ff.observations.iter().all(|o| (o.bearing.norm() - 1.0).abs() < 1e-12));
        assert!(fe.emit_feature_frame(3, 2).is_none());
        assert!(matches!(fe.process_frame(9, &frames[0]), Err(HostTrackerError::FrameGap { .. })));
    }
}
