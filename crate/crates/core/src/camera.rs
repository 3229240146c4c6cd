//! Pinhole camera with radial-tangential (k1, k2, p1, p2) distortion.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("undistortion of pixel ({u:.3}, {v:.3}) diverged (residual {residual:e})")]
    Diverged { u: f64, v: f64, residual: f64 },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
}

const MAX_ITERATIONS: usize = 8;
const TOLERANCE: f64 = 1e-8;
const DIVERGENCE_RESIDUAL: f64 = 1e-3;

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    /// Applies the forward model in normalized image coordinates.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (x * radial + dx, y * radial + dy)
    }

    fn distort_jacobian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let dradial = self.k1 + 2.0 * self.k2 * r2; // d radial / d r2
        let dxx = radial + x * dradial * 2.0 * x + 2.0 * self.p1 * y + 6.0 * self.p2 * x;
        let dxy = x * dradial * 2.0 * y + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dyx = y * dradial * 2.0 * x + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dyy = radial + y * dradial * 2.0 * y + 6.0 * self.p1 * y + 2.0 * self.p2 * x;
        Matrix2::new(dxx, dxy, dyx, dyy)
    }

    /// Inverts [`Distortion::distort`] with at most 8 Newton-refined
    /// fixed-point steps, stopping once the update is below 1e-8.
    pub fn undistort(&self, xd: f64, yd: f64) -> Option<(f64, f64, f64)> {
        let target = Vector2::new(xd, yd);
        let mut p = target;
        if self.is_zero() {
            return Some((xd, yd, 0.0));
        }
        for _ in 0..MAX_ITERATIONS {
            let (fx, fy) = self.distort(p.x, p.y);
            let err = Vector2::new(fx, fy) - target;
            let step = match self.distort_jacobian(p.x, p.y).try_inverse() {
                Some(inv) => inv * err,
                None => err,
            };
            p -= step;
            if step.norm() < TOLERANCE {
                break;
            }
        }
        let (fx, fy) = self.distort(p.x, p.y);
        let residual = (Vector2::new(fx, fy) - target).norm();
        residual.is_finite().then_some((p.x, p.y, residual))
    }
}

/// Intrinsics plus distortion, pixel <-> bearing conversions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, distortion: Distortion) -> Self {
        Self {
            intrinsics,
            distortion,
        }
    }

    /// Projects a camera-frame point to distorted pixel coordinates.
    pub fn project(&self, p: &Vec3) -> Result<(f64, f64), CameraError> {
        if p.z <= 1e-9 {
            return Err(CameraError::BehindCamera(p.z));
        }
        let (xd, yd) = self.distortion.distort(p.x / p.z, p.y / p.z);
        Ok(self.normalized_to_pixel(xd, yd))
    }

    #[inline]
    pub fn normalized_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.fx * x + k.cx, k.fy * y + k.cy)
    }

    #[inline]
    pub fn pixel_to_normalized(&self, u: f64, v: f64) -> (f64, f64) {
        let k = &self.intrinsics;
        ((u - k.cx) / k.fx, (v - k.cy) / k.fy)
    }

    /// Undistorted normalized coordinates of a pixel.
    pub fn undistort_pixel(&self, u: f64, v: f64) -> Result<(f64, f64), CameraError> {
        let (xd, yd) = self.pixel_to_normalized(u, v);
        match self.distortion.undistort(xd, yd) {
            Some((x, y, residual)) if residual * self.intrinsics.fx.max(self.intrinsics.fy) <= DIVERGENCE_RESIDUAL => {
                Ok((x, y))
            }
            Some((_, _, residual)) => Err(CameraError::Diverged { u, v, residual }),
            None => Err(CameraError::Diverged {
                u,
                v,
                residual: f64::INFINITY,
            }),
        }
    }

    /// Pixel of the ideal (distortion-free) camera seeing the same ray.
    pub fn undistort_to_ideal_pixel(&self, u: f64, v: f64) -> Result<(f64, f64), CameraError> {
        let (x, y) = self.undistort_pixel(u, v)?;
        Ok(self.normalized_to_pixel(x, y))
    }
}

/// Undistorts a pixel and lifts it to a unit bearing in the camera frame.
pub fn undistort_project(
    pixel: (f64, f64),
    intrinsics: &Intrinsics,
    distortion: &Distortion,
) -> Result<Vec3, CameraError> {
    let cam = CameraModel::new(*intrinsics, *distortion);
    let (x, y) = cam.undistort_pixel(pixel.0, pixel.1)?;
    Ok(Vec3::new(x, y, 1.0).normalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vga() -> Intrinsics {
        Intrinsics {
            fx: 460.0,
            fy: 455.0,
            cx: 320.0,
            cy: 240.0,
        }
    }

    #[test]
    fn principal_point_is_optical_axis() {
        let b = undistort_project((320.0, 240.0), &vga(), &Distortion::default()).unwrap();
        assert!((b - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn one_focal_length_right_is_45_degrees() {
        let k = vga();
        let b = undistort_project((k.cx + k.fx, k.cy), &k, &Distortion::default()).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b - Vec3::new(s, 0.0, s)).norm() < 1e-12);
    }

    /// True when r * (1 + k1 r^2 + k2 r^4) stays increasing until it
    /// exceeds `rd` with some margin, so `rd` has a unique preimage.
    fn has_unique_preimage(d: &Distortion, rd: f64) -> bool {
        let mut r: f64 = 0.0;
        loop {
            let r2 = r * r;
            if 1.0 + 3.0 * d.k1 * r2 + 5.0 * d.k2 * r2 * r2 <= 0.05 {
                return false;
            }
            if r * (1.0 + d.k1 * r2 + d.k2 * r2 * r2) >= 1.2 * rd {
                return true;
            }
            r += 1e-3;
        }
    }

    #[test]
    fn distort_undistort_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = vga();
        let mut checked = 0;
        while checked < 200 {
            let d = Distortion {
                k1: rng.random_range(-0.3..0.3),
                k2: rng.random_range(-0.1..0.1),
                p1: rng.random_range(-2e-3..2e-3),
                p2: rng.random_range(-2e-3..2e-3),
            };
            let cam = CameraModel::new(k, d);
            let u = rng.random_range(0.0..640.0);
            let v = rng.random_range(0.0..480.0);
            // Pixels outside the forward model's range have no preimage.
            let (xd, yd) = cam.pixel_to_normalized(u, v);
            if !has_unique_preimage(&d, (xd * xd + yd * yd).sqrt()) {
                continue;
            }
            let (x, y) = cam.undistort_pixel(u, v).unwrap();
            let (xd, yd) = d.distort(x, y);
            let (u2, v2) = cam.normalized_to_pixel(xd, yd);
            assert!((u2 - u).abs() < 1e-6 && (v2 - v).abs() < 1e-6, "{d:?} ({u},{v})");
            checked += 1;
        }
    }

    #[test]
    fn wild_distortion_reports_divergence() {
        let d = Distortion {
            // The corner pixel sits beyond the fold of r - r^3.
            k1: -1.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
        };
        let cam = CameraModel::new(vga(), d);
        assert!(matches!(
            cam.undistort_pixel(0.0, 0.0),
            Err(CameraError::Diverged { .. })
        ));
    }
}
