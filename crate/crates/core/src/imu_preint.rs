//! IMU preintegration between camera frames (midpoint scheme, first-order
//! covariance propagation). Error-state ordering is `[dtheta, dv, dp]`.

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImuSample;
use crate::geometry::{skew, so3_exp, Mat3, Quat, Vec3};

pub type Mat9 = SMatrix<f64, 9, 9>;

#[derive(Debug, Error, PartialEq)]
pub enum PreintError {
    #[error("need at least 2 IMU samples, got {0}")]
    TooFewSamples(usize),
    #[error("IMU timestamps not increasing at sample {0}")]
    NonMonotonic(usize),
    #[error("IMU gap of {dt} s before sample {index} exceeds twice the nominal period")]
    Gap { index: usize, dt: f64 },
    #[error("IMU data [{have0}, {have1}] does not span [{want0}, {want1}]")]
    NotSpanned {
        have0: f64,
        have1: f64,
        want0: f64,
        want1: f64,
    },
}

/// Continuous-time white-noise densities. Defaults are MPU6500-class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_noise_density: 2.94e-3,
            gyro_noise_density: 1.745e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuBias {
    pub accel: Vec3,
    pub gyro: Vec3,
}

/// Relative motion between two IMU timestamps, expressed in the body frame
/// at the start of the interval, gravity excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintDelta {
    pub dt_total: f64,
    pub delta_r: Quat,
    pub delta_v: Vec3,
    pub delta_p: Vec3,
    pub covariance: Mat9,
}

impl PreintDelta {
    pub fn identity() -> Self {
        Self {
            dt_total: 0.0,
            delta_r: Quat::identity(),
            delta_v: Vec3::zeros(),
            delta_p: Vec3::zeros(),
            covariance: Mat9::zeros(),
        }
    }

    /// Increment over `[t_i, t_k]` from increments over `[t_i, t_j]` and `[t_j, t_k]`.
    pub fn compose(&self, next: &PreintDelta) -> PreintDelta {
        let ra = self.delta_r.to_rotation_matrix().into_inner();
        let rb = next.delta_r.to_rotation_matrix().into_inner();
        let dt_b = next.dt_total;
        let mut a = Mat9::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&rb.transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra * skew(&next.delta_v)));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&Mat3::identity());
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ra * skew(&next.delta_p)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Mat3::identity() * dt_b));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&Mat3::identity());
        let mut b = Mat9::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&ra);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&ra);
        let cov = a * self.covariance * a.transpose() + b * next.covariance * b.transpose();
        PreintDelta {
            dt_total: self.dt_total + dt_b,
            delta_r: self.delta_r * next.delta_r,
            delta_v: self.delta_v + ra * next.delta_v,
            delta_p: self.delta_p + self.delta_v * dt_b + ra * next.delta_p,
            covariance: 0.5 * (cov + cov.transpose()),
        }
    }
}

/// World-frame navigation state of the body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub rotation: Quat,
    pub velocity: Vec3,
    pub position: Vec3,
}

/// Midpoint preintegration over `samples[0].t ..= samples.last().t`.
///
/// Fails when two consecutive samples are more than `2 * nominal_period`
/// apart.
pub fn integrate(
    samples: &[ImuSample],
    bias: &ImuBias,
    noise: &ImuNoise,
    nominal_period: f64,
) -> Result<PreintDelta, PreintError> {
    if samples.len() < 2 {
        return Err(PreintError::TooFewSamples(samples.len()));
    }
    let mut d = PreintDelta::identity();
    let sg2 = noise.gyro_noise_density.powi(2);
    let sa2 = noise.accel_noise_density.powi(2);
    for (k, w) in samples.windows(2).enumerate() {
        let (s0, s1) = (&w[0], &w[1]);
        let dt = s1.t - s0.t;
        if !(dt > 0.0) {
            return Err(PreintError::NonMonotonic(k + 1));
        }
        if dt > 2.0 * nominal_period {
            return Err(PreintError::Gap { index: k + 1, dt });
        }
        let gyro = 0.5 * (s0.gyro + s1.gyro) - bias.gyro;
        let step = so3_exp(&(gyro * dt));
        let r0 = d.delta_r;
        let r1 = r0 * step;
        let acc = 0.5 * (r0 * (s0.accel - bias.accel) + r1 * (s1.accel - bias.accel));

        // Error-state transition, linearized at the start of the step.
        let r0m = r0.to_rotation_matrix().into_inner();
        let a_body = 0.5 * ((s0.accel - bias.accel) + step * (s1.accel - bias.accel));
        let mut f = Mat9::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.to_rotation_matrix().into_inner().transpose());
        let dv_dth = -r0m * skew(&a_body) * dt;
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&dv_dth);
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(0.5 * dt * dv_dth));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Mat3::identity() * dt));
        let mut q = Mat9::zeros();
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Mat3::identity() * (sg2 * dt)));
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Mat3::identity() * (sa2 * dt)));
        q.fixed_view_mut::<3, 3>(3, 6).copy_from(&(Mat3::identity() * (0.5 * sa2 * dt * dt)));
        q.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Mat3::identity() * (0.5 * sa2 * dt * dt)));
        q.fixed_view_mut::<3, 3>(6, 6).copy_from(&(Mat3::identity() * (0.25 * sa2 * dt * dt * dt)));
        let cov = f * d.covariance * f.transpose() + q;
        d.covariance = 0.5 * (cov + cov.transpose());

        d.delta_p += d.delta_v * dt + 0.5 * acc * dt * dt;
        d.delta_v += acc * dt;
        d.delta_r = Quat::new_normalize(r1.into_inner());
        d.dt_total += dt;
    }
    Ok(d)
}

/// Propagates a world-frame state through a preintegrated increment.
pub fn predict(state: &NavState, delta: &PreintDelta, gravity: &Vec3) -> NavState {
    let dt = delta.dt_total;
    NavState {
        rotation: state.rotation * delta.delta_r,
        velocity: state.velocity + gravity * dt + state.rotation * delta.delta_v,
        position: state.position + state.velocity * dt + 0.5 * gravity * dt * dt + state.rotation * delta.delta_p,
    }
}

/// Samples covering exactly `[t0, t1]`; endpoints not on a sample are
/// linearly interpolated.
pub fn imu_window(imu: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>, PreintError> {
    let span_err = || PreintError::NotSpanned {
        have0: imu.first().map_or(f64::NAN, |s| s.t),
        have1: imu.last().map_or(f64::NAN, |s| s.t),
        want0: t0,
        want1: t1,
    };
    if imu.len() < 2 || !(t1 > t0) || imu[0].t > t0 || imu[imu.len() - 1].t < t1 {
        return Err(span_err());
    }
    let interp = |t: f64| -> ImuSample {
        let i = imu.partition_point(|s| s.t < t);
        if imu[i].t == t {
            return imu[i];
        }
        let (a, b) = (&imu[i - 1], &imu[i]);
        let u = (t - a.t) / (b.t - a.t);
        ImuSample {
            t,
            accel: a.accel + (b.accel - a.accel) * u,
            gyro: a.gyro + (b.gyro - a.gyro) * u,
        }
    };
    let first = imu.partition_point(|s| s.t <= t0);
    let last = imu.partition_point(|s| s.t < t1);
    let mut out = Vec::with_capacity(last.saturating_sub(first) + 2);
    out.push(interp(t0));
    out.extend_from_slice(&imu[first..last]);
    out.push(interp(t1));
    Ok(out)
}
