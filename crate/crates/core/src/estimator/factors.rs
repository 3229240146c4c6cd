//! Residuals and analytic Jacobians of the window factors.
//!
//! States are perturbed on the right: `R <- R Exp(dtheta)`, `p <- p + dp`,
//! `v <- v + dv`. Pose Jacobian columns are `[dp, dtheta]`; full frame
//! columns are `[dp, dtheta, dv]`.

use nalgebra::{SMatrix, SVector, Vector2};

use crate::dataset::Extrinsics;
use crate::geometry::{right_jacobian_inv, skew, so3_exp, so3_log, Mat3, Quat, Vec3};
use crate::imu_preint::{NavState, PreintDelta};

pub type Mat2x6 = SMatrix<f64, 2, 6>;
pub type Mat2x3 = SMatrix<f64, 2, 3>;
pub type Vec9 = SVector<f64, 9>;
pub type Mat9 = SMatrix<f64, 9, 9>;

/// Orthonormal basis of the tangent plane at unit vector `b`, as rows.
pub fn tangent_basis(b: &Vec3) -> Mat2x3 {
    let a = if b.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = b.cross(&a).normalize();
    let t2 = b.cross(&t1);
    Mat2x3::from_rows(&[t1.transpose(), t2.transpose()])
}

/// Camera-frame point of a landmark anchored in `anchor`, seen from `target`.
pub fn landmark_in_camera(
    anchor: &NavState,
    target: &NavState,
    ext: &Extrinsics,
    anchor_bearing: &Vec3,
    inv_depth: f64,
) -> Vec3 {
    let x_ca = anchor_bearing / inv_depth;
    let x_w = anchor.rotation * (ext.rotation * x_ca + ext.translation) + anchor.position;
    let y_b = target.rotation.inverse() * (x_w - target.position);
    ext.rotation.inverse() * (y_b - ext.translation)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionJacobians {
    pub anchor: Mat2x6,
    pub target: Mat2x6,
    pub inv_depth: Vector2<f64>,
}

/// Tangent-plane residual `B(obs) (x / |x| - obs)` of one observation.
pub fn reprojection_residual(
    anchor: &NavState,
    target: &NavState,
    ext: &Extrinsics,
    anchor_bearing: &Vec3,
    inv_depth: f64,
    observed: &Vec3,
) -> (Vector2<f64>, ReprojectionJacobians) {
    let r_bc = ext.rotation.to_rotation_matrix().into_inner();
    let r_a = anchor.rotation.to_rotation_matrix().into_inner();
    let r_t = target.rotation.to_rotation_matrix().into_inner();
    let x_ca = anchor_bearing / inv_depth;
    let z = r_bc * x_ca + ext.translation;
    let x_w = r_a * z + anchor.position;
    let y_b = r_t.transpose() * (x_w - target.position);
    let x_c = r_bc.transpose() * (y_b - ext.translation);

    let norm = x_c.norm();
    let n = x_c / norm;
    let basis = tangent_basis(observed);
    let residual = basis * (n - observed);

    let d_norm = (Mat3::identity() - n * n.transpose()) / norm;
    // d r / d x_w
    let d_xw = basis * d_norm * r_bc.transpose() * r_t.transpose();
    let mut target_j = Mat2x6::zeros();
    target_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-d_xw));
    target_j
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(basis * d_norm * r_bc.transpose() * skew(&y_b)));
    let mut anchor_j = Mat2x6::zeros();
    anchor_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_xw);
    anchor_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-d_xw * r_a * skew(&z)));
    let d_rho = d_xw * r_a * r_bc * (-anchor_bearing / (inv_depth * inv_depth));
    (
        residual,
        ReprojectionJacobians {
            anchor: anchor_j,
            target: target_j,
            inv_depth: d_rho,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreintJacobians {
    pub i: Mat9,
    pub j: Mat9,
}

/// Residual `[r_theta, r_v, r_p]` between consecutive frames, unwhitened.
pub fn preint_residual(si: &NavState, sj: &NavState, delta: &PreintDelta, gravity: &Vec3) -> (Vec9, PreintJacobians) {
    let dt = delta.dt_total;
    let ri = si.rotation.to_rotation_matrix().into_inner();
    let rj = sj.rotation.to_rotation_matrix().into_inner();
    let rit = ri.transpose();
    let e = delta.delta_r.inverse() * si.rotation.inverse() * sj.rotation;
    let r_th = so3_log(&e);
    let dv_w = sj.velocity - si.velocity - gravity * dt;
    let dp_w = sj.position - si.position - si.velocity * dt - 0.5 * gravity * dt * dt;
    let r_v = rit * dv_w - delta.delta_v;
    let r_p = rit * dp_w - delta.delta_p;
    let mut r = Vec9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_th);
    r.fixed_rows_mut::<3>(3).copy_from(&r_v);
    r.fixed_rows_mut::<3>(6).copy_from(&r_p);

    let jr_inv = right_jacobian_inv(&r_th);
    let mut ji = Mat9::zeros();
    let mut jj = Mat9::zeros();
    // Column blocks: 0 dp, 3 dtheta, 6 dv. Row blocks: 0 theta, 3 v, 6 p.
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jr_inv * rj.transpose() * ri));
    jj.fixed_view_mut::<3, 3>(0, 3).copy_from(&jr_inv);

    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&skew(&(rit * dv_w)));
    ji.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-rit));
    jj.fixed_view_mut::<3, 3>(3, 6).copy_from(&rit);

    ji.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-rit));
    ji.fixed_view_mut::<3, 3>(6, 3).copy_from(&skew(&(rit * dp_w)));
    ji.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-rit * dt));
    jj.fixed_view_mut::<3, 3>(6, 0).copy_from(&rit);
    (r, PreintJacobians { i: ji, j: jj })
}

/// Upper-triangular `S` with `S^T S = cov^-1`; whitened residual is `S r`.
pub fn sqrt_information(cov: &Mat9) -> Mat9 {
    let sym = 0.5 * (cov + cov.transpose());
    let scale = sym.diagonal().max().max(1e-6);
    let mut floor = 0.0;
    loop {
        let c = sym + Mat9::identity() * floor;
        if let Some(ch) = c.cholesky() {
            if let Some(inv) = ch.inverse().cholesky() {
                return inv.l().transpose();
            }
        }
        floor = if floor == 0.0 { scale * 1e-12 } else { floor * 10.0 };
    }
}

/// Applies a right perturbation `[dp, dtheta, dv]` to a state.
pub fn retract(s: &NavState, d: &Vec9) -> NavState {
    let dp = Vec3::new(d[0], d[1], d[2]);
    let dth = Vec3::new(d[3], d[4], d[5]);
    let dv = Vec3::new(d[6], d[7], d[8]);
    NavState {
        rotation: Quat::new_normalize((s.rotation * so3_exp(&dth)).into_inner()),
        velocity: s.velocity + dv,
        position: s.position + dp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu_preint::Mat9 as Cov9;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> NavState {
        let v = |rng: &mut ChaCha8Rng, s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        NavState {
            rotation: so3_exp(&v(rng, 2.0)),
            velocity: v(rng, 2.0),
            position: v(rng, 3.0),
        }
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn tangent_basis_is_orthonormal() {
        for b in [Vec3::z(), Vec3::x(), Vec3::new(0.3, -0.4, 0.866).normalize()] {
            let t = tangent_basis(&b);
            let g = t * t.transpose();
            assert!((g - SMatrix::<f64, 2, 2>::identity()).norm() < 1e-12);
            assert!((t * b).norm() < 1e-12);
        }
    }

    #[test]
    fn reprojection_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let ext = Extrinsics {
                rotation: so3_exp(&Vec3::new(0.1, -1.2, 0.4)),
                translation: Vec3::new(0.05, 0.0, 0.02),
            };
            let a = random_state(&mut rng);
            let mut t = a;
            t.position += Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            t.rotation *= so3_exp(&Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
            let bearing = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0).normalize();
            let rho = rng.random_range(0.1..1.0);
            let x = landmark_in_camera(&a, &t, &ext, &bearing, rho);
            let obs = (x.normalize() + Vec3::new(0.01, -0.02, 0.0)).normalize();
            let (_, j) = reprojection_residual(&a, &t, &ext, &bearing, rho, &obs);
            let f = |a: &NavState, t: &NavState, rho: f64| reprojection_residual(a, t, &ext, &bearing, rho, &obs).0;
            for which in 0..2 {
                let mut fd = Mat2x6::zeros();
                for k in 0..6 {
                    let mut d = Vec9::zeros();
                    d[k] = h;
                    let (plus, minus) = if which == 0 {
                        (f(&retract(&a, &d), &t, rho), f(&retract(&a, &(-d)), &t, rho))
                    } else {
                        (f(&a, &retract(&t, &d), rho), f(&a, &retract(&t, &(-d)), rho))
                    };
                    fd.set_column(k, &((plus - minus) / (2.0 * h)));
                }
                let an = if which == 0 { j.anchor } else { j.target };
                worst = worst.max(max_rel(an.as_slice(), fd.as_slice()));
            }
            let fd_rho = (f(&a, &t, rho + h) - f(&a, &t, rho - h)) / (2.0 * h);
            worst = worst.max(max_rel(j.inv_depth.as_slice(), fd_rho.as_slice()));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn preint_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Vec3::new(0.0, 0.0, -9.81);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let si = random_state(&mut rng);
            let sj = random_state(&mut rng);
            let delta = PreintDelta {
                dt_total: rng.random_range(0.05..0.2),
                delta_r: so3_exp(&Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3))),
                delta_v: Vec3::new(rng.random_range(-1.0..1.0), 0.2, -0.3),
                delta_p: Vec3::new(0.1, rng.random_range(-0.1..0.1), 0.05),
                covariance: Cov9::identity(),
            };
            let (_, j) = preint_residual(&si, &sj, &delta, &g);
            for which in 0..2 {
                let mut fd = Mat9::zeros();
                for k in 0..9 {
                    let mut d = Vec9::zeros();
                    d[k] = h;
                    let (plus, minus) = if which == 0 {
                        (
                            preint_residual(&retract(&si, &d), &sj, &delta, &g).0,
                            preint_residual(&retract(&si, &(-d)), &sj, &delta, &g).0,
                        )
                    } else {
                        (
                            preint_residual(&si, &retract(&sj, &d), &delta, &g).0,
                            preint_residual(&si, &retract(&sj, &(-d)), &delta, &g).0,
                        )
                    };
                    fd.set_column(k, &((plus - minus) / (2.0 * h)));
                }
                let an = if which == 0 { j.i } else { j.j };
                worst = worst.max(max_rel(an.as_slice(), fd.as_slice()));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn exact_increment_gives_zero_residual() {
        let g = Vec3::new(0.0, 0.0, -9.81);
        let si = NavState {
            rotation: so3_exp(&Vec3::new(0.1, 0.2, 0.3)),
            velocity: Vec3::new(1.0, 0.5, 0.0),
            position: Vec3::new(2.0, -1.0, 1.0),
        };
        let sj = NavState {
            rotation: so3_exp(&Vec3::new(0.15, 0.1, 0.5)),
            velocity: Vec3::new(1.2, 0.4, 0.1),
            position: Vec3::new(2.1, -0.95, 1.01),
        };
        let dt = 0.1;
        let ri = si.rotation;
        let delta = PreintDelta {
            dt_total: dt,
            delta_r: ri.inverse() * sj.rotation,
            delta_v: ri.inverse() * (sj.velocity - si.velocity - g * dt),
            delta_p: ri.inverse() * (sj.position - si.position - si.velocity * dt - 0.5 * g * dt * dt),
            covariance: Cov9::identity(),
        };
        let (r, _) = preint_residual(&si, &sj, &delta, &g);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn sqrt_information_whitens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mat9::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let cov = a * a.transpose() + Mat9::identity() * 0.1;
        let s = sqrt_information(&cov);
        let should_be_identity = s * cov * s.transpose();
        assert!((should_be_identity - Mat9::identity()).norm() < 1e-9);
        // Singular input still yields a finite factor.
        assert!(sqrt_information(&Mat9::zeros()).iter().all(|v| v.is_finite()));
    }
}
