//! Trajectory association, alignment and error metrics.

use std::fmt::Write as _;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::StampedPose;
use crate::geometry::{yaw_rotation, Mat3, Vec3};

pub const DEFAULT_MAX_DT: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty trajectory")]
    Empty,
    #[error("no pose pairs within {0} s")]
    NoPairs(f64),
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("trajectory spans {span} s, prefix needs {need} s")]
    InsufficientSpan { span: f64, need: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair {
    pub est: StampedPose,
    pub gt: StampedPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
    /// Position RMSE of the fitted pairs after alignment, m.
    pub rmse: f64,
}

impl AlignmentResult {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
            rmse: 0.0,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn apply(&self, pose: &StampedPose) -> StampedPose {
        StampedPose {
            t: pose.t,
            position: self.apply_point(&pose.position),
            orientation: nalgebra::UnitQuaternion::from_rotation_matrix(&self.rotation) * pose.orientation,
        }
    }

    pub fn apply_pairs(&self, pairs: &[PosePair]) -> Vec<PosePair> {
        pairs
            .iter()
            .map(|p| PosePair {
                est: self.apply(&p.est),
                gt: p.gt,
            })
            .collect()
    }

    pub fn yaw(&self) -> f64 {
        let m = self.rotation.matrix();
        m[(1, 0)].atan2(m[(0, 0)])
    }
}

/// Pairs every estimate with its nearest ground-truth pose within `max_dt`.
pub fn associate(est: &[StampedPose], gt: &[StampedPose], max_dt: f64) -> Result<Vec<PosePair>, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let pairs: Vec<PosePair> = est
        .iter()
        .filter_map(|e| {
            crate::dataset::nearest_by_time(gt, e.t, |p| p.t, max_dt).map(|g| PosePair { est: *e, gt: *g })
        })
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::NoPairs(max_dt));
    }
    Ok(pairs)
}

fn rmse_of(pairs: &[PosePair], a: &AlignmentResult) -> f64 {
    let s: f64 = pairs.iter().map(|p| (p.gt.position - a.apply_point(&p.est.position)).norm_squared()).sum();
    (s / pairs.len() as f64).sqrt()
}

/// Closed-form least-squares similarity (Umeyama) mapping est onto gt.
pub fn align_sim3(pairs: &[PosePair]) -> Result<AlignmentResult, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs {
            need: 3,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let me = pairs.iter().map(|p| p.est.position).sum::<Vec3>() / n;
    let mg = pairs.iter().map(|p| p.gt.position).sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut var_e = 0.0;
    for p in pairs {
        let e = p.est.position - me;
        let g = p.gt.position - mg;
        cov += g * e.transpose();
        var_e += e.norm_squared();
    }
    cov /= n;
    var_e /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("U"), svd.v_t.expect("V^T"));
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    if var_e <= 0.0 || sv[0].1 <= 0.0 || sv[1].1 <= 1e-12 * sv[0].1 {
        return Err(EvalError::Degenerate("positions are collinear or coincident"));
    }
    let mut s = Mat3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        let k = sv[2].0;
        s[(k, k)] = -1.0;
    }
    let r = u * s * vt;
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace_ds / var_e;
    let rotation = Rotation3::from_matrix_unchecked(r);
    let translation = mg - scale * (rotation * me);
    let mut out = AlignmentResult {
        scale,
        rotation,
        translation,
        rmse: 0.0,
    };
    out.rmse = rmse_of(pairs, &out);
    Ok(out)
}

/// Least-squares translation plus rotation about world z, unit scale.
pub fn align_pose_yaw(pairs: &[PosePair]) -> Result<AlignmentResult, EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs {
            need: 2,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let me = pairs.iter().map(|p| p.est.position).sum::<Vec3>() / n;
    let mg = pairs.iter().map(|p| p.gt.position).sum::<Vec3>() / n;
    let (mut sin_sum, mut cos_sum, mut spread) = (0.0, 0.0, 0.0);
    for p in pairs {
        let e = p.est.position - me;
        let g = p.gt.position - mg;
        sin_sum += e.x * g.y - e.y * g.x;
        cos_sum += e.x * g.x + e.y * g.y;
        spread += e.norm_squared();
    }
    if spread <= 0.0 {
        return Err(EvalError::Degenerate("all estimated positions coincide"));
    }
    let yaw = if sin_sum == 0.0 && cos_sum == 0.0 { 0.0 } else { sin_sum.atan2(cos_sum) };
    let rotation = yaw_rotation(yaw);
    let translation = mg - rotation * me;
    let mut out = AlignmentResult {
        scale: 1.0,
        rotation,
        translation,
        rmse: 0.0,
    };
    out.rmse = rmse_of(pairs, &out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteStats {
    pub rmse: f64,
    /// Population standard deviation of the per-pair error norms.
    pub sd: f64,
    pub count: usize,
}

/// RMSE and SD of position error norms of already aligned pairs.
pub fn ate_rmse(pairs: &[PosePair]) -> Result<AteStats, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let errs: Vec<f64> = pairs.iter().map(|p| (p.gt.position - p.est.position).norm()).collect();
    let n = errs.len() as f64;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(AteStats {
        rmse,
        sd: var.max(0.0).sqrt(),
        count: errs.len(),
    })
}

/// Pose-yaw alignment fit on pairs within `duration` of the first pair,
/// with the RMSE reported over the fitted prefix only.
pub fn align_prefix(pairs: &[PosePair], duration: f64) -> Result<AlignmentResult, EvalError> {
    let (Some(first), Some(last)) = (pairs.first(), pairs.last()) else {
        return Err(EvalError::Empty);
    };
    let span = last.est.t - first.est.t;
    if span < duration {
        return Err(EvalError::InsufficientSpan { span, need: duration });
    }
    let end = first.est.t + duration;
    let prefix: Vec<PosePair> = pairs.iter().filter(|p| p.est.t <= end).copied().collect();
    align_pose_yaw(&prefix)
}

/// Cumulative ground-truth path length at each pair.
pub fn path_lengths(pairs: &[PosePair]) -> Vec<f64> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        if i > 0 {
            acc += (p.gt.position - pairs[i - 1].gt.position).norm();
        }
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    /// Linear-interpolated quartiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |f: f64| {
            let pos = f * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtrajectoryErrors {
    pub length: f64,
    pub translational_m: Vec<f64>,
    pub rotational_deg: Vec<f64>,
    pub translational: Option<Quartiles>,
    pub rotational: Option<Quartiles>,
}

/// Relative-pose errors over randomly sampled spans of given gt path
/// length. Each length draws from its own seed derived from `seed`.
pub fn subtrajectory_errors(pairs: &[PosePair], lengths: &[f64], samples: usize, seed: u64) -> Vec<SubtrajectoryErrors> {
    let cum = path_lengths(pairs);
    let total = cum.last().copied().unwrap_or(0.0);
    let mut out = Vec::new();
    for (li, &len) in lengths.iter().enumerate() {
        if !(len > 0.0) || len > total {
            log::warn!("skipping sub-trajectory length {len} m: path is {total:.3} m");
            continue;
        }
        // Starts from which the length is reachable.
        let last_start = cum.partition_point(|&c| c <= total - len + 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (li as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (mut te, mut re) = (Vec::new(), Vec::new());
        if last_start > 0 {
            for _ in 0..samples {
                let s = rng.random_range(0..last_start);
                // Small slack so spans that are exact multiples of the sampling land on the sample.
                let e = cum.partition_point(|&c| c < cum[s] + len - 1e-9).min(pairs.len() - 1);
                let (a, b) = (&pairs[s], &pairs[e]);
                let gt_r = a.gt.orientation.inverse() * b.gt.orientation;
                let gt_t = a.gt.orientation.inverse() * (b.gt.position - a.gt.position);
                let es_r = a.est.orientation.inverse() * b.est.orientation;
                let es_t = a.est.orientation.inverse() * (b.est.position - a.est.position);
                te.push((gt_t - es_t).norm());
                re.push(gt_r.angle_to(&es_r).to_degrees());
            }
        }
        out.push(SubtrajectoryErrors {
            length: len,
            translational: Quartiles::of(&te),
            rotational: Quartiles::of(&re),
            translational_m: te,
            rotational_deg: re,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pairs: usize,
    pub path_length_m: f64,
    pub sim3: AteStats,
    pub sim3_scale: f64,
    pub pose_yaw: AteStats,
    /// Full-trajectory error after a prefix-only pose-yaw fit, if long enough.
    pub prefix_aligned: Option<AteStats>,
    pub ate_over_path: f64,
}

/// Full metric set used by the CLI.
pub fn evaluate(est: &[StampedPose], gt: &[StampedPose], max_dt: f64, prefix_s: f64) -> Result<Metrics, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let sim3 = align_sim3(&pairs)?;
    let yaw = align_pose_yaw(&pairs)?;
    let sim3_stats = ate_rmse(&sim3.apply_pairs(&pairs))?;
    let yaw_stats = ate_rmse(&yaw.apply_pairs(&pairs))?;
    let prefix_aligned = match align_prefix(&pairs, prefix_s) {
        Ok(a) => Some(ate_rmse(&a.apply_pairs(&pairs))?),
        Err(EvalError::InsufficientSpan { .. }) => None,
        Err(e) => return Err(e),
    };
    let path = path_lengths(&pairs).last().copied().unwrap_or(0.0);
    Ok(Metrics {
        pairs: pairs.len(),
        path_length_m: path,
        sim3: sim3_stats,
        sim3_scale: sim3.scale,
        pose_yaw: yaw_stats,
        prefix_aligned,
        ate_over_path: if path > 0.0 { sim3_stats.rmse / path } else { f64::NAN },
    })
}

/// Per-length distributions as `length,sample,translational_m,rotational_deg`.
pub fn subtrajectory_csv(rows: &[SubtrajectoryErrors]) -> String {
    let mut s = String::from("length,sample,translational_m,rotational_deg\n");
    for r in rows {
        for (i, (t, a)) in r.translational_m.iter().zip(&r.rotational_deg).enumerate() {
            let _ = writeln!(s, "{},{},{},{}", r.length, i, t, a);
        }
    }
    s
}

/// Top-down (x-y) overlay of aligned estimate and ground truth.
pub fn trajectory_svg(pairs: &[PosePair]) -> String {
    let pts: Vec<(f64, f64)> = pairs
        .iter()
        .flat_map(|p| [(p.gt.position.x, p.gt.position.y), (p.est.position.x, p.est.position.y)])
        .collect();
    let (size, pad) = (480.0, 20.0);
    let (x0, x1, y0, y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |a, p| (a.0.min(p.0), a.1.max(p.0), a.2.min(p.1), a.3.max(p.1)),
    );
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let map = |x: f64, y: f64| (pad + (x - x0) / span * size, pad + size - (y - y0) / span * size);
    let poly = |sel: &dyn Fn(&PosePair) -> Vec3| {
        pairs
            .iter()
            .map(|p| {
                let v = sel(p);
                let (a, b) = map(v.x, v.y);
                format!("{a:.2},{b:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let total = size + 2.0 * pad;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\">\n\
         <polyline fill=\"none\" stroke=\"#444\" stroke-width=\"1.5\" points=\"{}\"/>\n\
         <polyline fill=\"none\" stroke=\"#d33\" stroke-width=\"1\" points=\"{}\"/>\n\
         <text x=\"{pad}\" y=\"14\" font-size=\"12\">ground truth (grey), estimate (red)</text>\n</svg>\n",
        poly(&|p| p.gt.position),
        poly(&|p| p.est.position)
    )
}

/// Box plot of translational sub-trajectory errors per length.
pub fn subtrajectory_svg(rows: &[SubtrajectoryErrors]) -> String {
    let (w, h, pad) = (80.0 * rows.len().max(1) as f64 + 60.0, 300.0, 30.0);
    let max = rows
        .iter()
        .flat_map(|r| r.translational_m.iter().copied())
        .fold(1e-9, f64::max);
    let y = |v: f64| h - pad - v / max * (h - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    for (i, r) in rows.iter().enumerate() {
        let Some(q) = &r.translational else { continue };
        let lo = r.translational_m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.translational_m.iter().copied().fold(0.0, f64::max);
        let cx = 60.0 + 80.0 * i as f64;
        let _ = writeln!(s, "<line x1=\"{cx}\" x2=\"{cx}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"#000\"/>", y(lo), y(hi));
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{:.2}\" width=\"40\" height=\"{:.2}\" fill=\"#9cf\" stroke=\"#000\"/>",
            cx - 20.0,
            y(q.q3),
            (y(q.q1) - y(q.q3)).max(0.0)
        );
        let _ = writeln!(s, "<line x1=\"{}\" x2=\"{}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"#000\" stroke-width=\"2\"/>", cx - 20.0, cx + 20.0, y(q.median), y(q.median));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\">{} m</text>", cx - 14.0, h - 10.0, r.length);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{from_ypr, so3_exp, Quat};
    use rand_distr::{Distribution, Normal};

    fn pose(t: f64, p: Vec3, q: Quat) -> StampedPose {
        StampedPose {
            t,
            position: p,
            orientation: q,
        }
    }

    fn wiggle(n: usize, rate: f64) -> Vec<StampedPose> {
        (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                pose(
                    t,
                    Vec3::new(3.0 * (0.4 * t).cos(), 2.0 * (0.7 * t).sin(), 1.0 + 0.3 * (0.5 * t).sin()),
                    from_ypr(0.4 * t, 0.05 * t.sin(), 0.02 * t.cos()),
                )
            })
            .collect()
    }

    fn pairs_of(a: &[StampedPose], b: &[StampedPose]) -> Vec<PosePair> {
        a.iter().zip(b).map(|(e, g)| PosePair { est: *e, gt: *g }).collect()
    }

    #[test]
    fn identical_timestamps_all_pair() {
        let gt = wiggle(50, 10.0);
        assert_eq!(associate(&gt, &gt, DEFAULT_MAX_DT).unwrap().len(), 50);
    }

    #[test]
    fn ten_hz_against_hundred_hz() {
        let gt = wiggle(1000, 100.0);
        let est: Vec<StampedPose> = wiggle(100, 10.0).into_iter().map(|mut p| {
            p.t += 0.004;
            p
        }).collect();
        let pairs = associate(&est, &gt, DEFAULT_MAX_DT).unwrap();
        assert_eq!(pairs.len(), est.len());
        assert!(pairs.iter().all(|p| (p.est.t - p.gt.t).abs() <= 0.005 + 1e-12));
    }

    #[test]
    fn disjoint_ranges_fail() {
        let gt = wiggle(10, 10.0);
        let est: Vec<StampedPose> = gt.iter().map(|p| pose(p.t + 100.0, p.position, p.orientation)).collect();
        assert_eq!(associate(&est, &gt, DEFAULT_MAX_DT), Err(EvalError::NoPairs(DEFAULT_MAX_DT)));
    }

    #[test]
    fn sim3_identity() {
        let gt = wiggle(40, 10.0);
        let a = align_sim3(&pairs_of(&gt, &gt)).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert!((a.rotation.matrix() - Mat3::identity()).norm() < 1e-12);
        assert!(a.translation.norm() < 1e-12 && a.rmse < 1e-12);
    }

    #[test]
    fn sim3_recovers_known_transform() {
        let gt = wiggle(40, 10.0);
        let rot = Rotation3::from_scaled_axis(Vec3::new(0.3, -0.5, 1.1));
        let (s, t) = (0.37, Vec3::new(1.0, -2.0, 0.5));
        // est = inverse transform of gt, so aligning maps it back.
        let est: Vec<StampedPose> = gt
            .iter()
            .map(|p| pose(p.t, rot.inverse() * (p.position - t) / s, p.orientation))
            .collect();
        let a = align_sim3(&pairs_of(&est, &gt)).unwrap();
        assert!((a.scale - s).abs() < 1e-9);
        assert!((a.rotation.matrix() - rot.matrix()).norm() < 1e-9);
        assert!((a.translation - t).norm() < 1e-9);
    }

    #[test]
    fn sim3_noise_residual_matches_monte_carlo() {
        // With n pairs and 7 fitted parameters the expected squared
        // residual is about 3 sigma^2 (n - 7/3) / n per pair.
        let gt = wiggle(200, 10.0);
        let sigma = 0.01;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut acc = 0.0;
        let trials = 50;
        for k in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let est: Vec<StampedPose> = gt
                .iter()
                .map(|p| {
                    let d = Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
                    pose(p.t, p.position + d, p.orientation)
                })
                .collect();
            acc += align_sim3(&pairs_of(&est, &gt)).unwrap().rmse.powi(2);
        }
        let n = gt.len() as f64;
        let expected = 3.0 * sigma * sigma * (n - 7.0 / 3.0) / n;
        let got = acc / trials as f64;
        assert!((got / expected - 1.0).abs() < 0.05, "{got} vs {expected}");
    }

    #[test]
    fn sim3_rejects_collinear() {
        let gt: Vec<StampedPose> = (0..10).map(|i| pose(i as f64, Vec3::new(i as f64, 0.0, 0.0), Quat::identity())).collect();
        assert!(matches!(align_sim3(&pairs_of(&gt, &gt)), Err(EvalError::Degenerate(_))));
    }

    #[test]
    fn pose_yaw_recovers_yaw_and_shift() {
        let gt = wiggle(40, 10.0);
        let yaw = 30f64.to_radians();
        let t = Vec3::new(0.5, -1.0, 2.0);
        let r = yaw_rotation(yaw);
        let est: Vec<StampedPose> = gt.iter().map(|p| pose(p.t, r.inverse() * (p.position - t), p.orientation)).collect();
        let a = align_pose_yaw(&pairs_of(&est, &gt)).unwrap();
        assert!((a.yaw() - yaw).abs() < 1e-12);
        assert!((a.translation - t).norm() < 1e-12);
        assert!(a.rmse < 1e-12);
        let id = align_pose_yaw(&pairs_of(&gt, &gt)).unwrap();
        assert!(id.yaw().abs() < 1e-12 && id.translation.norm() < 1e-12);
    }

    #[test]
    fn pose_yaw_cannot_absorb_roll() {
        let gt = wiggle(40, 10.0);
        let r = Rotation3::from_axis_angle(&Vec3::x_axis(), 0.3);
        let est: Vec<StampedPose> = gt.iter().map(|p| pose(p.t, r * p.position, p.orientation)).collect();
        assert!(align_pose_yaw(&pairs_of(&est, &gt)).unwrap().rmse > 1e-3);
        let same: Vec<StampedPose> = (0..3).map(|i| pose(i as f64, Vec3::zeros(), Quat::identity())).collect();
        assert!(matches!(align_pose_yaw(&pairs_of(&same, &gt)), Err(EvalError::Degenerate(_))));
    }

    #[test]
    fn ate_constant_and_zero_errors() {
        let gt = wiggle(20, 10.0);
        let z = ate_rmse(&pairs_of(&gt, &gt)).unwrap();
        assert_eq!((z.rmse, z.sd), (0.0, 0.0));
        let est: Vec<StampedPose> = gt.iter().map(|p| pose(p.t, p.position + Vec3::new(0.0, 0.3, 0.4), p.orientation)).collect();
        let c = ate_rmse(&pairs_of(&est, &gt)).unwrap();
        assert!((c.rmse - 0.5).abs() < 1e-12 && c.sd < 1e-12);
    }

    #[test]
    fn ate_matches_direct_formula() {
        let gt = wiggle(30, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let est: Vec<StampedPose> = gt
            .iter()
            .map(|p| pose(p.t, p.position + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0), p.orientation))
            .collect();
        let stats = ate_rmse(&pairs_of(&est, &gt)).unwrap();
        let norms: Vec<f64> = est.iter().zip(&gt).map(|(e, g)| (e.position - g.position).norm()).collect();
        let n = norms.len() as f64;
        let rmse = (norms.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        let mean = norms.iter().sum::<f64>() / n;
        let sd = (norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!((stats.rmse - rmse).abs() < 1e-15 && (stats.sd - sd).abs() < 1e-15);
    }

    fn straight_line(n: usize, speed: f64) -> Vec<StampedPose> {
        (0..n).map(|i| {
            let t = i as f64 * 0.1;
            pose(t, Vec3::new(speed * t, 0.0, 0.0), Quat::identity())
        }).collect()
    }

    #[test]
    fn subtrajectories_zero_for_perfect_estimate() {
        let gt = wiggle(300, 10.0);
        let rows = subtrajectory_errors(&pairs_of(&gt, &gt), &[1.0, 5.0], 50, 3);
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.translational_m.len(), 50);
            assert!(r.translational_m.iter().chain(&r.rotational_deg).all(|&e| e < 1e-6));
        }
    }

    #[test]
    fn yaw_drift_grows_linearly_in_time() {
        let speed = 1.0;
        let gt = straight_line(601, speed);
        let omega = 0.01;
        let est: Vec<StampedPose> = gt.iter().map(|p| pose(p.t, p.position, so3_exp(&Vec3::new(0.0, 0.0, omega * p.t)))).collect();
        let rows = subtrajectory_errors(&pairs_of(&est, &gt), &[5.0, 10.0, 20.0], 20, 1);
        for r in &rows {
            let traversal = r.length / speed;
            for &e in &r.rotational_deg {
                assert!((e - (omega * traversal).to_degrees()).abs() < 1e-6, "{e}");
            }
        }
    }

    #[test]
    fn subtrajectories_are_seed_deterministic_and_skip_long() {
        let gt = wiggle(200, 10.0);
        let est: Vec<StampedPose> = gt.iter().map(|p| pose(p.t, p.position * 1.01, p.orientation)).collect();
        let pairs = pairs_of(&est, &gt);
        assert_eq!(subtrajectory_errors(&pairs, &[2.0], 30, 9), subtrajectory_errors(&pairs, &[2.0], 30, 9));
        assert!(subtrajectory_errors(&pairs, &[1e6], 10, 9).is_empty());
    }

    #[test]
    fn prefix_alignment_behaviour() {
        let gt = wiggle(300, 10.0);
        let pairs = pairs_of(&gt, &gt);
        let a = align_prefix(&pairs, 15.0).unwrap();
        assert!(a.rmse < 1e-12 && ate_rmse(&a.apply_pairs(&pairs)).unwrap().rmse < 1e-12);
        // Drift-free for 15 s, then diverging.
        let est: Vec<StampedPose> = gt
            .iter()
            .map(|p| {
                let off = if p.t > 15.0 { 0.1 * (p.t - 15.0) } else { 0.0 };
                pose(p.t, p.position + Vec3::new(off, 0.0, 0.0), p.orientation)
            })
            .collect();
        let pairs = pairs_of(&est, &gt);
        let a = align_prefix(&pairs, 15.0).unwrap();
        assert!(a.rmse < 1e-12);
        assert!(ate_rmse(&a.apply_pairs(&pairs)).unwrap().rmse > 0.1);
        assert!(matches!(align_prefix(&pairs, 100.0), Err(EvalError::InsufficientSpan { .. })));
    }

    #[test]
    fn svg_and_csv_outputs() {
        let gt = wiggle(100, 10.0);
        let pairs = pairs_of(&gt, &gt);
        assert!(trajectory_svg(&pairs).starts_with("<svg"));
        let rows = subtrajectory_errors(&pairs, &[1.0], 5, 0);
        assert_eq!(subtrajectory_csv(&rows).lines().count(), 6);
        assert!(subtrajectory_svg(&rows).contains("<rect"));
    }
}
