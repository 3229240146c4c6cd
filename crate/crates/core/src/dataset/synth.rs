//! Deterministic synthetic sequences: analytic trajectories, IMU from exact
//! derivatives, and frames rendered as Gaussian point sprites.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, Extrinsics, FrameRecord, ImuSample, Sequence, SequenceManifest, StampedPose};
use crate::camera::{CameraModel, Distortion, Intrinsics};
use crate::geometry::{from_ypr, mat_to_quat, Mat3, Quat, Vec3};
use crate::image::GrayImage;
use crate::imu_preint::ImuNoise;

/// `amplitude * sin(omega * t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

/// Scalar signal `offset + rate * t + sum of sinusoids`, with exact derivatives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Signal {
    pub offset: f64,
    pub rate: f64,
    pub terms: Vec<Sinusoid>,
}

impl Signal {
    pub fn constant(c: f64) -> Self {
        Self {
            offset: c,
            ..Self::default()
        }
    }

    pub fn linear(offset: f64, rate: f64) -> Self {
        Self {
            offset,
            rate,
            terms: Vec::new(),
        }
    }

    pub fn sine(amplitude: f64, omega: f64, phase: f64) -> Self {
        Self::default().plus_sine(amplitude, omega, phase)
    }

    pub fn plus_sine(mut self, amplitude: f64, omega: f64, phase: f64) -> Self {
        self.terms.push(Sinusoid {
            amplitude,
            omega,
            phase,
        });
        self
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            offset: self.offset * k,
            rate: self.rate * k,
            terms: self
                .terms
                .iter()
                .map(|s| Sinusoid {
                    amplitude: s.amplitude * k,
                    ..*s
                })
                .collect(),
        }
    }

    pub fn sum(&self, other: &Signal) -> Self {
        Self {
            offset: self.offset + other.offset,
            rate: self.rate + other.rate,
            terms: self.terms.iter().chain(&other.terms).copied().collect(),
        }
    }

    /// Product of two signals without linear terms, expanded back into
    /// sinusoids with `sin a sin b = (cos(a - b) - cos(a + b)) / 2`.
    pub fn product(&self, other: &Signal) -> Self {
        assert!(self.rate == 0.0 && other.rate == 0.0, "product of signals with linear terms");
        let mut out = Signal::constant(self.offset * other.offset);
        for s in &other.terms {
            out = out.plus_sine(self.offset * s.amplitude, s.omega, s.phase);
        }
        for s in &self.terms {
            out = out.plus_sine(other.offset * s.amplitude, s.omega, s.phase);
        }
        for a in &self.terms {
            for b in &other.terms {
                let k = 0.5 * a.amplitude * b.amplitude;
                out = out
                    .plus_sine(k, a.omega - b.omega, a.phase - b.phase + FRAC_PI_2)
                    .plus_sine(-k, a.omega + b.omega, a.phase + b.phase + FRAC_PI_2);
            }
        }
        out
    }

    pub fn value(&self, t: f64) -> f64 {
        self.offset
            + self.rate * t
            + self
                .terms
                .iter()
                .map(|s| s.amplitude * (s.omega * t + s.phase).sin())
                .sum::<f64>()
    }

    pub fn d1(&self, t: f64) -> f64 {
        self.rate
            + self
                .terms
                .iter()
                .map(|s| s.amplitude * s.omega * (s.omega * t + s.phase).cos())
                .sum::<f64>()
    }

    pub fn d2(&self, t: f64) -> f64 {
        -self
            .terms
            .iter()
            .map(|s| s.amplitude * s.omega * s.omega * (s.omega * t + s.phase).sin())
            .sum::<f64>()
    }
}

/// Body trajectory: world position plus Z-Y-X Euler attitude.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothTrajectory {
    pub position: [Signal; 3],
    pub yaw: Signal,
    pub pitch: Signal,
    pub roll: Signal,
}

impl SmoothTrajectory {
    pub fn position(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| self.position[i].value(t))
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| self.position[i].d1(t))
    }

    pub fn acceleration(&self, t: f64) -> Vec3 {
        Vec3::from_fn(|i, _| self.position[i].d2(t))
    }

    pub fn orientation(&self, t: f64) -> Quat {
        from_ypr(self.yaw.value(t), self.pitch.value(t), self.roll.value(t))
    }

    /// Angular velocity in the body frame.
    pub fn angular_velocity(&self, t: f64) -> Vec3 {
        let (p, r) = (self.pitch.value(t), self.roll.value(t));
        let (dy, dp, dr) = (self.yaw.d1(t), self.pitch.d1(t), self.roll.d1(t));
        Vec3::new(
            dr - dy * p.sin(),
            dp * r.cos() + dy * p.cos() * r.sin(),
            -dp * r.sin() + dy * p.cos() * r.cos(),
        )
    }

    pub fn pose(&self, t: f64) -> StampedPose {
        StampedPose {
            t,
            position: self.position(t),
            orientation: self.orientation(t),
        }
    }

    /// Ideal IMU reading: specific force and angular rate in the body frame.
    pub fn imu(&self, t: f64, gravity: &Vec3) -> ImuSample {
        let r = self.orientation(t);
        ImuSample {
            t,
            accel: r.inverse_transform_vector(&(self.acceleration(t) - gravity)),
            gyro: self.angular_velocity(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub path: SmoothTrajectory,
    pub duration: f64,
}

impl TrajectorySpec {
    pub fn stationary(position: Vec3, yaw: f64, duration: f64) -> Self {
        Self {
            path: SmoothTrajectory {
                position: [
                    Signal::constant(position.x),
                    Signal::constant(position.y),
                    Signal::constant(position.z),
                ],
                yaw: Signal::constant(yaw),
                ..Default::default()
            },
            duration,
        }
    }

    /// Horizontal circle about the origin, heading along the tangent.
    pub fn circle(radius: f64, speed: f64, height: f64, duration: f64) -> Self {
        let w = speed / radius;
        Self {
            path: SmoothTrajectory {
                position: [
                    Signal::sine(radius, w, FRAC_PI_2),
                    Signal::sine(radius, w, 0.0),
                    Signal::constant(height),
                ],
                yaw: Signal::linear(FRAC_PI_2, w),
                ..Default::default()
            },
            duration,
        }
    }

    /// Rotation in place about the vertical axis.
    pub fn yaw_spin(rate: f64, duration: f64) -> Self {
        let mut s = Self::stationary(Vec3::new(0.0, 0.0, 1.0), 0.0, duration);
        s.path.yaw = Signal::linear(0.0, rate);
        s
    }

    /// A circle that morphs into a figure-eight and back over `duration`,
    /// with height, pitch and roll oscillations and a steady yaw spin.
    pub fn circle_figure_eight(duration: f64) -> Self {
        let radius = 3.0;
        let w = TAU / 15.0;
        let circle = [Signal::sine(radius, w, 0.0), Signal::sine(-radius, w, FRAC_PI_2)];
        let eight = [Signal::sine(radius, w, 0.0), Signal::sine(0.5 * radius, 2.0 * w, 0.0)];
        // Blend weight 0 -> 1 -> 0 over the run.
        let blend = Signal::constant(0.5).plus_sine(-0.5, TAU / duration, FRAC_PI_2);
        let keep = Signal::constant(1.0).sum(&blend.scaled(-1.0));
        let xy: Vec<Signal> = (0..2)
            .map(|i| keep.product(&circle[i]).sum(&blend.product(&eight[i])))
            .collect();
        Self {
            path: SmoothTrajectory {
                position: [xy[0].clone(), xy[1].clone(), Signal::constant(1.2).plus_sine(0.3, TAU / 7.0, 0.0)],
                yaw: Signal::linear(0.0, w).plus_sine(0.3, TAU / 11.0, 0.4),
                pitch: Signal::sine(0.08, TAU / 5.0, 0.0),
                roll: Signal::sine(0.06, TAU / 6.5, 1.0),
            },
            duration,
        }
    }
}

/// Background behind the sprites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Backdrop {
    /// Value noise fixed in the image (does not move with the camera).
    Screen { amplitude: f64, cell_px: usize },
    /// Two-octave value noise painted on the vertical cylinder of `radius`
    /// around the world z axis; cell size in metres.
    Wall { radius: f64, amplitude: f64, cell_m: f64 },
}

/// World points plus per-point sprite contrast, and the background texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub points: Vec<Vec3>,
    /// Signed peak intensity offset of each sprite.
    pub contrast: Vec<f64>,
    pub sprite_sigma: f64,
    pub background: f64,
    pub backdrop: Backdrop,
    pub seed: u64,
}

/// Hash-based lattice value in `[-0.5, 0.5)`.
fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let mut z = seed
        ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Bilinear value noise; `u` wraps with period `wrap` lattice cells when given.
fn value_noise(seed: u64, u: f64, v: f64, wrap: Option<i64>) -> f64 {
    let (iu, iv) = (u.floor(), v.floor());
    let (fu, fv) = (u - iu, v - iv);
    let (iu, iv) = (iu as i64, iv as i64);
    // Callers keep `u` within one period, so a single subtraction wraps.
    let w = |i: i64| match wrap {
        Some(n) if i >= n => i - n,
        Some(n) if i < 0 => i + n,
        _ => i,
    };
    let l = |i: i64, j: i64| lattice(seed, w(i), j);
    (1.0 - fv) * ((1.0 - fu) * l(iu, iv) + fu * l(iu + 1, iv)) + fv * ((1.0 - fu) * l(iu, iv + 1) + fu * l(iu + 1, iv + 1))
}

impl SceneSpec {
    /// `count` points on a vertical cylinder wall around the z axis, with a
    /// flat backdrop.
    pub fn cylinder(radius: f64, z_range: (f64, f64), count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(count);
        let mut contrast = Vec::with_capacity(count);
        for _ in 0..count {
            let a = rng.random_range(0.0..TAU);
            let z = rng.random_range(z_range.0..z_range.1);
            points.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // Pareto-tailed contrast keeps the detection count a smooth power of the threshold.
            let u: f64 = rng.random_range(1e-3..1.0);
            contrast.push(sign * (30.0 * u.powf(-1.0 / 1.5)).min(125.0));
        }
        Self {
            points,
            contrast,
            sprite_sigma: 0.7,
            background: 128.0,
            backdrop: Backdrop::Screen {
                amplitude: 0.0,
                cell_px: 8,
            },
            seed,
        }
    }

    pub fn with_backdrop(mut self, backdrop: Backdrop) -> Self {
        self.backdrop = backdrop;
        self
    }

    fn screen_texture(&self, w: usize, h: usize, amplitude: f64, cell: usize) -> Vec<f32> {
        let cell = cell.max(1) as f64;
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let v = if amplitude == 0.0 {
                    0.0
                } else {
                    value_noise(self.seed, x as f64 / cell, y as f64 / cell, None)
                };
                out.push((self.background + amplitude * v) as f32);
            }
        }
        out
    }
}

/// Per-pixel wall renderer: undistorted rays are cached once.
struct WallPainter {
    rays: Vec<Vec3>,
    radius: f64,
    amplitude: f64,
    octaves: [(f64, i64, f64); 2],
    background: f64,
    seed: u64,
}

impl WallPainter {
    fn new(cam: &CameraModel, w: usize, h: usize, scene: &SceneSpec, radius: f64, amplitude: f64, cell_m: f64) -> Self {
        let mut rays = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = cam
                    .undistort_pixel(x as f64, y as f64)
                    .unwrap_or_else(|_| cam.pixel_to_normalized(x as f64, y as f64));
                rays.push(Vec3::new(nx, ny, 1.0));
            }
        }
        let circumference = TAU * radius;
        let octave = |cell: f64, gain: f64| {
            let n = (circumference / cell).round().max(1.0);
            (n / circumference, n as i64, gain)
        };
        Self {
            rays,
            radius,
            amplitude,
            octaves: [octave(cell_m, 1.0), octave(cell_m / 2.7, 0.5)],
            background: scene.background,
            seed: scene.seed,
        }
    }

    fn paint(&self, buf: &mut [f32], r_wc: &Quat, t_wc: &Vec3) {
        let m = r_wc.to_rotation_matrix().into_inner();
        let r2 = self.radius * self.radius;
        for (px, ray) in buf.iter_mut().zip(&self.rays) {
            let d = m * ray;
            let a = d.x * d.x + d.y * d.y;
            let mut v = 0.0;
            if a > 1e-12 {
                let b = 2.0 * (t_wc.x * d.x + t_wc.y * d.y);
                let c = t_wc.x * t_wc.x + t_wc.y * t_wc.y - r2;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let s = (-b + disc.sqrt()) / (2.0 * a);
                    if s > 0.0 {
                        let hit = t_wc + d * s;
                        let arc = (hit.y.atan2(hit.x) + std::f64::consts::PI) * self.radius;
                        for (k, &(per_m, n, gain)) in self.octaves.iter().enumerate() {
                            let seed = self.seed.wrapping_add(k as u64 * 0x5851_F42D);
                            v += gain * value_noise(seed, arc * per_m, hit.z * per_m, Some(n));
                        }
                    }
                }
            }
            *px = (self.background + self.amplitude * v) as f32;
        }
    }
}

/// Sensor noise. Densities are continuous-time; the per-sample standard
/// deviation is `density * sqrt(rate)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
    /// Additive Gaussian pixel noise, intensity units.
    pub pixel_sigma: f64,
    pub seed: u64,
}

/// Everything [`synthesize_sequence`] needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetup {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    pub manifest: SequenceManifest,
}

impl SyntheticSetup {
    /// VGA global-shutter camera at 20 FPS looking along body x, 1 kHz IMU.
    pub fn vga_manifest() -> SequenceManifest {
        SequenceManifest {
            width: 640,
            height: 480,
            camera: CameraModel::new(
                Intrinsics {
                    fx: 420.0,
                    fy: 420.0,
                    cx: 319.5,
                    cy: 239.5,
                },
                Distortion {
                    k1: -0.02,
                    k2: 0.004,
                    p1: 0.0002,
                    p2: -0.0001,
                },
            ),
            extrinsics: Extrinsics {
                rotation: mat_to_quat(&Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)),
                translation: Vec3::new(0.05, 0.0, 0.02),
            },
            frame_rate: 20.0,
            imu_rate: 1000.0,
            gravity: 9.81,
            imu_noise: ImuNoise::default(),
            flow_origin: (0.0, 0.0),
            flow_scale: 1.0,
        }
    }

    /// Noise-free circle / figure-eight run inside a textured cylinder.
    pub fn circle_figure_eight(duration: f64) -> Self {
        Self {
            scene: SceneSpec::cylinder(10.0, (-3.0, 5.5), 5000, 7).with_backdrop(Backdrop::Wall {
                radius: 10.0,
                amplitude: 80.0,
                cell_m: 0.15,
            }),
            trajectory: TrajectorySpec::circle_figure_eight(duration),
            noise: NoiseSpec::default(),
            manifest: Self::vga_manifest(),
        }
    }

    /// Same camera and scene, body at rest.
    pub fn stationary(duration: f64) -> Self {
        Self {
            trajectory: TrajectorySpec::stationary(Vec3::new(0.0, 0.0, 1.2), 0.3, duration),
            ..Self::circle_figure_eight(duration)
        }
    }

    pub fn synthesize(&self) -> Result<Sequence, DatasetError> {
        synthesize_sequence(&self.scene, &self.trajectory, &self.noise, &self.manifest)
    }
}

/// Renders frames at `k / frame_rate` and IMU samples at `j / imu_rate`;
/// ground truth is reported at IMU rate.
pub fn synthesize_sequence(
    scene: &SceneSpec,
    trajectory: &TrajectorySpec,
    noise: &NoiseSpec,
    manifest: &SequenceManifest,
) -> Result<Sequence, DatasetError> {
    manifest.validate()?;
    if scene.points.len() != scene.contrast.len() {
        return Err(DatasetError::Invalid("scene points and contrast lengths differ".into()));
    }
    if !(trajectory.duration > 0.0) {
        return Err(DatasetError::Invalid("trajectory duration must be > 0".into()));
    }
    let path = &trajectory.path;
    let g = manifest.gravity_vector();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);

    let n_imu = (trajectory.duration * manifest.imu_rate + 1e-9).floor() as usize;
    let acc_sd = noise.accel_noise_density * manifest.imu_rate.sqrt();
    let gyr_sd = noise.gyro_noise_density * manifest.imu_rate.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gauss3 = |rng: &mut ChaCha8Rng, sd: f64| {
        if sd == 0.0 {
            Vec3::zeros()
        } else {
            Vec3::from_fn(|_, _| sd * std_normal.sample(rng))
        }
    };
    let mut imu = Vec::with_capacity(n_imu + 1);
    let mut ground_truth = Vec::with_capacity(n_imu + 1);
    for j in 0..=n_imu {
        let t = j as f64 / manifest.imu_rate;
        let mut s = path.imu(t, &g);
        s.accel += noise.accel_bias + gauss3(&mut rng, acc_sd);
        s.gyro += noise.gyro_bias + gauss3(&mut rng, gyr_sd);
        imu.push(s);
        ground_truth.push(path.pose(t));
    }

    let (w, h) = (manifest.width, manifest.height);
    let cam = &manifest.camera;
    let (base, wall) = match scene.backdrop {
        Backdrop::Screen { amplitude, cell_px } => (scene.screen_texture(w, h, amplitude, cell_px), None),
        Backdrop::Wall {
            radius,
            amplitude,
            cell_m,
        } => (
            vec![scene.background as f32; w * h],
            Some(WallPainter::new(cam, w, h, scene, radius, amplitude, cell_m)),
        ),
    };
    let r_bc = manifest.extrinsics.rotation;
    let t_bc = manifest.extrinsics.translation;
    let inv2s2 = 1.0 / (2.0 * scene.sprite_sigma * scene.sprite_sigma);
    let pix_noise = Normal::new(0.0, noise.pixel_sigma.max(0.0)).expect("finite sigma");

    let n_frames = (trajectory.duration * manifest.frame_rate + 1e-9).floor() as u64;
    let mut frames = Vec::with_capacity(n_frames as usize + 1);
    let mut buf = base.clone();
    for k in 0..=n_frames {
        let t = k as f64 / manifest.frame_rate;
        let r_wb = path.orientation(t);
        let r_wc = r_wb * r_bc;
        let t_wc = path.position(t) + r_wb * t_bc;
        match &wall {
            Some(p) => p.paint(&mut buf, &r_wc, &t_wc),
            None => buf.copy_from_slice(&base),
        }
        let mut in_front = 0usize;
        for (p, &c) in scene.points.iter().zip(&scene.contrast) {
            let pc = r_wc.inverse_transform_vector(&(p - t_wc));
            if pc.z <= 0.1 {
                continue;
            }
            in_front += 1;
            let Ok((u, v)) = cam.project(&pc) else { continue };
            let (ru, rv) = (u.round(), v.round());
            if ru < 1.0 || rv < 1.0 || ru > (w - 2) as f64 || rv > (h - 2) as f64 {
                continue;
            }
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (px, py) = (ru + dx as f64, rv + dy as f64);
                    let d2 = (px - u).powi(2) + (py - v).powi(2);
                    buf[py as usize * w + px as usize] += (c * (-d2 * inv2s2).exp()) as f32;
                }
            }
        }
        if in_front == 0 && !scene.points.is_empty() {
            return Err(DatasetError::AllPointsBehind { frame_id: k });
        }
        let image = GrayImage::from_fn(w, h, |x, y| {
            let mut v = buf[y * w + x] as f64;
            if noise.pixel_sigma > 0.0 {
                v += pix_noise.sample(&mut rng);
            }
            v.round().clamp(0.0, 255.0) as u8
        });
        frames.push(FrameRecord { frame_id: k, t, image });
    }

    let seq = Sequence {
        manifest: manifest.clone(),
        frames,
        imu,
        flow: BTreeMap::new(),
        ground_truth,
    };
    seq.validate()?;
    Ok(seq)
}

/// World pose `(R_wc, t_wc)` of the camera at `t`.
pub fn camera_pose(path: &SmoothTrajectory, ext: &Extrinsics, t: f64) -> (Quat, Vec3) {
    let r_wb = path.orientation(t);
    (r_wb * ext.rotation, path.position(t) + r_wb * ext.translation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest(imu_rate: f64) -> SequenceManifest {
        let mut m = SyntheticSetup::vga_manifest();
        m.width = 96;
        m.height = 64;
        m.camera.intrinsics = Intrinsics {
            fx: 60.0,
            fy: 60.0,
            cx: 47.5,
            cy: 31.5,
        };
        m.imu_rate = imu_rate;
        m
    }

    fn no_points() -> SceneSpec {
        let mut s = SceneSpec::cylinder(5.0, (0.0, 1.0), 0, 1);
        s.points.clear();
        s
    }

    #[test]
    fn signal_derivatives_match_finite_differences() {
        let s = Signal::linear(0.3, -0.2).plus_sine(1.5, 0.7, 0.1).plus_sine(-0.4, 2.3, 1.0);
        let h = 1e-5;
        for t in [0.0, 0.37, 5.0] {
            let fd1 = (s.value(t + h) - s.value(t - h)) / (2.0 * h);
            let fd2 = (s.d1(t + h) - s.d1(t - h)) / (2.0 * h);
            assert!((fd1 - s.d1(t)).abs() < 1e-8);
            assert!((fd2 - s.d2(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn product_expansion_matches_pointwise_product() {
        let a = Signal::constant(0.5).plus_sine(-0.5, 0.3, FRAC_PI_2);
        let b = Signal::constant(0.2).plus_sine(3.0, 1.1, 0.4).plus_sine(1.0, 2.2, -0.3);
        let p = a.product(&b);
        for t in [0.0, 0.9, 7.3, 42.0] {
            assert!((p.value(t) - a.value(t) * b.value(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn angular_velocity_matches_attitude_derivative() {
        let tr = TrajectorySpec::circle_figure_eight(60.0).path;
        let h = 1e-6;
        for t in [0.5, 13.0, 31.7] {
            // R(t+h) = R(t) Exp(w h) to first order in the body frame.
            let dq = tr.orientation(t - h).inverse() * tr.orientation(t + h);
            let w_fd = dq.scaled_axis() / (2.0 * h);
            assert!((w_fd - tr.angular_velocity(t)).norm() < 1e-7);
        }
    }

    #[test]
    fn stationary_imu_measures_gravity_only() {
        let m = small_manifest(200.0);
        let tr = TrajectorySpec::stationary(Vec3::new(1.0, 2.0, 0.5), 0.7, 1.0);
        let seq = synthesize_sequence(&no_points(), &tr, &NoiseSpec::default(), &m).unwrap();
        for s in &seq.imu {
            assert!((s.accel.norm() - 9.81).abs() < 1e-12);
            assert_eq!(s.gyro, Vec3::zeros());
        }
    }

    #[test]
    fn circle_accel_magnitude_includes_centripetal() {
        let (r, v) = (2.0, 1.5);
        let tr = TrajectorySpec::circle(r, v, 1.0, 2.0);
        let expected = (9.81f64.powi(2) + (v * v / r).powi(2)).sqrt();
        let m = small_manifest(100.0);
        let seq = synthesize_sequence(&no_points(), &tr, &NoiseSpec::default(), &m).unwrap();
        for s in &seq.imu {
            assert!((s.accel.norm() - expected).abs() < 1e-9, "{}", s.accel.norm());
        }
    }

    #[test]
    fn yaw_spin_gyro_is_constant() {
        let tr = TrajectorySpec::yaw_spin(0.8, 1.0);
        let m = small_manifest(100.0);
        let seq = synthesize_sequence(&no_points(), &tr, &NoiseSpec::default(), &m).unwrap();
        for s in &seq.imu {
            assert!((s.gyro - Vec3::new(0.0, 0.0, 0.8)).norm() < 1e-15);
        }
    }

    /// Fourth-order Runge-Kutta over pairs of IMU steps, using the middle
    /// sample as the exact midpoint.
    fn rk4_reference(imu: &[ImuSample], g: Vec3, q0: Quat, v0: Vec3, p0: Vec3) -> (Quat, Vec3, Vec3) {
        let (mut q, mut v, mut p) = (q0, v0, p0);
        let mut j = 0;
        while j + 2 < imu.len() {
            let hh = imu[j + 2].t - imu[j].t;
            let (s0, s1, s2) = (&imu[j], &imu[j + 1], &imu[j + 2]);
            let f = |q: &Quat, v: &Vec3, s: &ImuSample| {
                let dq = q.into_inner() * nalgebra::Quaternion::from_imag(s.gyro) * 0.5;
                (dq, q.transform_vector(&s.accel) + g, *v)
            };
            let step = |q: &Quat, dq: &nalgebra::Quaternion<f64>, k: f64| {
                Quat::new_normalize(q.into_inner() + dq * k)
            };
            let (k1q, k1v, k1p) = f(&q, &v, s0);
            let q2 = step(&q, &k1q, hh / 2.0);
            let (k2q, k2v, k2p) = f(&q2, &(v + k1v * hh / 2.0), s1);
            let q3 = step(&q, &k2q, hh / 2.0);
            let (k3q, k3v, k3p) = f(&q3, &(v + k2v * hh / 2.0), s1);
            let q4 = step(&q, &k3q, hh);
            let (k4q, k4v, k4p) = f(&q4, &(v + k3v * hh), s2);
            q = Quat::new_normalize(q.into_inner() + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (hh / 6.0));
            v += (k1v + 2.0 * k2v + 2.0 * k3v + k4v) * (hh / 6.0);
            p += (k1p + 2.0 * k2p + 2.0 * k3p + k4p) * (hh / 6.0);
            j += 2;
        }
        (q, v, p)
    }

    #[test]
    fn reference_integration_reproduces_trajectory() {
        let m = small_manifest(1000.0);
        let spec = TrajectorySpec::circle_figure_eight(60.0);
        let tr = TrajectorySpec {
            duration: 2.0,
            ..spec
        };
        let seq = synthesize_sequence(&no_points(), &tr, &NoiseSpec::default(), &m).unwrap();
        let p = &tr.path;
        let (q, _, pos) = rk4_reference(&seq.imu, m.gravity_vector(), p.orientation(0.0), p.velocity(0.0), p.position(0.0));
        let t_end = seq.imu.last().unwrap().t;
        assert!((pos - p.position(t_end)).norm() < 1e-6 * t_end, "{}", (pos - p.position(t_end)).norm());
        assert!(q.angle_to(&p.orientation(t_end)) < 1e-9);
    }

    #[test]
    fn frames_and_imu_share_timestamps() {
        let m = small_manifest(100.0);
        let tr = TrajectorySpec::stationary(Vec3::zeros(), 0.0, 1.0);
        let seq = synthesize_sequence(&no_points(), &tr, &NoiseSpec::default(), &m).unwrap();
        assert_eq!(seq.frames.len(), 21);
        assert_eq!(seq.imu.len(), 101);
        for f in &seq.frames {
            let i = seq.imu_index_near(f.t).unwrap();
            assert_eq!(seq.imu[i].t, f.t);
        }
    }

    #[test]
    fn points_behind_camera_error_names_frame() {
        let m = small_manifest(100.0);
        let mut scene = SceneSpec::cylinder(5.0, (0.0, 1.0), 1, 3);
        // Body faces +x, camera looks along body x; put the point behind.
        scene.points[0] = Vec3::new(-5.0, 0.0, 0.0);
        let tr = TrajectorySpec::stationary(Vec3::zeros(), 0.0, 0.2);
        match synthesize_sequence(&scene, &tr, &NoiseSpec::default(), &m) {
            Err(DatasetError::AllPointsBehind { frame_id }) => assert_eq!(frame_id, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rendering_is_deterministic_and_sprites_land_on_projection() {
        let m = small_manifest(100.0);
        let mut scene = SceneSpec::cylinder(5.0, (0.0, 1.0), 1, 3);
        scene.points[0] = Vec3::new(5.0, 0.0, 0.0);
        scene.contrast[0] = 100.0;
        let tr = TrajectorySpec::stationary(Vec3::zeros(), 0.0, 0.1);
        let a = synthesize_sequence(&scene, &tr, &NoiseSpec::default(), &m).unwrap();
        let b = synthesize_sequence(&scene, &tr, &NoiseSpec::default(), &m).unwrap();
        assert_eq!(a, b);
        let (r_wc, t_wc) = camera_pose(&tr.path, &m.extrinsics, 0.0);
        let pc = r_wc.inverse_transform_vector(&(scene.points[0] - t_wc));
        let (u, v) = m.camera.project(&pc).unwrap();
        let img = &a.frames[0].image;
        let (mut best, mut at) = (0u8, (0, 0));
        for y in 0..img.height() {
            for x in 0..img.width() {
                if img.get(x, y) > best {
                    best = img.get(x, y);
                    at = (x, y);
                }
            }
        }
        assert_eq!(at, (u.round() as usize, v.round() as usize));
        let d2 = (u - u.round()).powi(2) + (v - v.round()).powi(2);
        let expected = 128.0 + 100.0 * (-d2 / (2.0 * 0.7 * 0.7)).exp();
        assert!((best as f64 - expected).abs() <= 0.5 + 1e-9, "{best} vs {expected}");
    }

    #[test]
    fn gyro_noise_matches_density() {
        let m = small_manifest(400.0);
        let noise = NoiseSpec {
            gyro_noise_density: 1e-3,
            seed: 9,
            ..Default::default()
        };
        let tr = TrajectorySpec::stationary(Vec3::zeros(), 0.0, 5.0);
        let seq = synthesize_sequence(&no_points(), &tr, &noise, &m).unwrap();
        let n = (seq.imu.len() * 3) as f64;
        let var: f64 = seq.imu.iter().map(|s| s.gyro.norm_squared()).sum::<f64>() / n;
        let expected = 1e-3 * 400f64.sqrt();
        assert!((var.sqrt() / expected - 1.0).abs() < 0.05);
    }
}
