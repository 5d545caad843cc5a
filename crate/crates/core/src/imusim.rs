//! Accelerometer and gyroscope synthesis for a sensor rigidly mounted on a
//! leg segment.
//!
//! Derivatives of the sampled poses use finite differences: second-order
//! central stencils in the interior and second-order one-sided stencils at
//! the two ends of the series.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::motion::{Segment, SegmentTrajectory};
use crate::se3::{unskew_unchecked, RigidPose, Rotation3, Vec3};

/// Standard gravity, m/s^2.
pub const STANDARD_GRAVITY: f64 = 9.80665;

/// Global gravity vector (y up).
pub fn gravity() -> Vec3 {
    Vec3::new(0.0, -STANDARD_GRAVITY, 0.0)
}

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("need at least {needed} trajectory samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid error model: {0}")]
    InvalidModel(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("imu csv line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Placement of the sensor in its parent segment's frame (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorMount {
    pub segment: Segment,
    pub position: Vec3,
    pub orientation: Rotation3,
}

impl Default for SensorMount {
    /// Shank, 14 cm distal of the knee joint center, axes aligned with the segment.
    fn default() -> Self {
        Self {
            segment: Segment::Shank,
            position: Vec3::new(0.0, -0.14, 0.0),
            orientation: Rotation3::identity(),
        }
    }
}

impl SensorMount {
    pub fn local_pose(&self) -> RigidPose {
        RigidPose::new(self.orientation, self.position)
    }
}

/// One accelerometer + gyroscope reading in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force, m/s^2.
    pub accel: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
}

/// Additive sensor errors. All values are per axis in sensor units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuErrorModel {
    pub accel_noise_sigma: f64,
    pub gyro_noise_sigma: f64,
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
    pub seed: u64,
}

impl ImuErrorModel {
    pub fn is_ideal(&self) -> bool {
        self.accel_noise_sigma == 0.0
            && self.gyro_noise_sigma == 0.0
            && self.accel_bias == Vec3::zeros()
            && self.gyro_bias == Vec3::zeros()
    }
}

/// Global sensor pose per sample: segment pose composed with the mount.
pub fn sensor_world_poses(traj: &SegmentTrajectory, mount: &SensorMount) -> Vec<RigidPose> {
    let local = mount.local_pose();
    traj.segment(mount.segment)
        .iter()
        .map(|p| p.compose(&local))
        .collect()
}

/// First derivative of a uniformly sampled series at index `i`.
fn first_derivative<T>(x: &[T], i: usize, dt: f64) -> T
where
    T: Copy + std::ops::Sub<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let n = x.len();
    if i == 0 {
        (x[1] * 4.0 - x[0] * 3.0 - x[2]) * (0.5 / dt)
    } else if i == n - 1 {
        (x[n - 1] * 3.0 - x[n - 2] * 4.0 + x[n - 3]) * (0.5 / dt)
    } else {
        (x[i + 1] - x[i - 1]) * (0.5 / dt)
    }
}

/// Second derivative of a uniformly sampled series at index `i`.
fn second_derivative<T>(x: &[T], i: usize, dt: f64) -> T
where
    T: Copy + std::ops::Sub<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let n = x.len();
    let inv = 1.0 / (dt * dt);
    if i == 0 {
        (x[0] * 2.0 - x[1] * 5.0 + x[2] * 4.0 - x[3]) * inv
    } else if i == n - 1 {
        (x[n - 1] * 2.0 - x[n - 2] * 5.0 + x[n - 3] * 4.0 - x[n - 4]) * inv
    } else {
        (x[i + 1] - x[i] * 2.0 + x[i - 1]) * inv
    }
}

/// Sensor velocity at sample `i`, expressed in the sensor frame, from the
/// same difference stencils the accelerometer model uses.
pub fn sensor_velocity(poses: &[RigidPose], i: usize, dt: f64) -> Vec3 {
    let pos: Vec<Vec3> = poses.iter().map(|p| p.translation).collect();
    poses[i].rotation.transpose().apply(&first_derivative(&pos, i, dt))
}

/// Minimum trajectory length accepted by [`simulate_imu`].
pub const MIN_SAMPLES: usize = 5;

/// Ideal IMU readings:
/// `a_i = R_i^T (r''_seg + R''_seg p_sen - g)` and `[w_i]x = R_i^T R'_i`
/// (antisymmetric part), where `R_i` is the sensor orientation.
pub fn simulate_imu(
    traj: &SegmentTrajectory,
    mount: &SensorMount,
    g: &Vec3,
) -> Result<Vec<ImuSample>, ImuError> {
    let n = traj.len();
    if n < MIN_SAMPLES {
        return Err(ImuError::TooFewSamples {
            needed: MIN_SAMPLES,
            got: n,
        });
    }
    let dt = traj.dt();
    let segment = traj.segment(mount.segment);
    let seg_pos: Vec<Vec3> = segment.iter().map(|p| p.translation).collect();
    let seg_rot: Vec<Matrix3<f64>> = segment.iter().map(|p| *p.rotation.matrix()).collect();
    let sensor_rot: Vec<Matrix3<f64>> = segment
        .iter()
        .map(|p| p.rotation.matrix() * mount.orientation.matrix())
        .collect();

    Ok((0..n)
        .map(|i| {
            let r_ddot = second_derivative(&seg_pos, i, dt);
            let rot_ddot = second_derivative(&seg_rot, i, dt);
            let rot = &sensor_rot[i];
            let accel = rot.transpose() * (r_ddot + rot_ddot * mount.position - g);
            let rot_dot = first_derivative(&sensor_rot, i, dt);
            let gyro = unskew_unchecked(&(rot.transpose() * rot_dot));
            ImuSample {
                t: traj.time(i),
                accel,
                gyro,
            }
        })
        .collect())
}

/// Adds constant bias and seeded white Gaussian noise.
pub fn corrupt(samples: &[ImuSample], model: &ImuErrorModel) -> Result<Vec<ImuSample>, ImuError> {
    for (name, s) in [
        ("accel_noise_sigma", model.accel_noise_sigma),
        ("gyro_noise_sigma", model.gyro_noise_sigma),
    ] {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(ImuError::InvalidModel(format!("{name} must be finite and >= 0")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let accel_noise = Normal::new(0.0, model.accel_noise_sigma).expect("validated sigma");
    let gyro_noise = Normal::new(0.0, model.gyro_noise_sigma).expect("validated sigma");
    let mut draw = |dist: &Normal<f64>, sigma: f64| -> Vec3 {
        if sigma == 0.0 {
            Vec3::zeros()
        } else {
            Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng))
        }
    };
    Ok(samples
        .iter()
        .map(|s| {
            let na = draw(&accel_noise, model.accel_noise_sigma);
            let ng = draw(&gyro_noise, model.gyro_noise_sigma);
            ImuSample {
                t: s.t,
                accel: s.accel + model.accel_bias + na,
                gyro: s.gyro + model.gyro_bias + ng,
            }
        })
        .collect())
}

pub fn imu_to_csv(samples: &[ImuSample]) -> String {
    let mut out = String::from("t,ax,ay,az,wx,wy,wz\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z
        );
    }
    out
}

pub fn parse_imu_csv(text: &str) -> Result<Vec<ImuSample>, ImuError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| {
        let l = l.trim();
        !l.is_empty() && !l.starts_with('#')
    });
    match lines.next() {
        Some((_, h)) if h.split(',').map(str::trim).eq(["t", "ax", "ay", "az", "wx", "wy", "wz"]) => {}
        Some((i, _)) => {
            return Err(ImuError::Parse {
                line: i + 1,
                message: "expected header t,ax,ay,az,wx,wy,wz".into(),
            })
        }
        None => {
            return Err(ImuError::Parse {
                line: 0,
                message: "empty file".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, l) in lines {
        let v: Result<Vec<f64>, _> = l.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let v = v.map_err(|e| ImuError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if v.len() != 7 {
            return Err(ImuError::Parse {
                line: i + 1,
                message: format!("expected 7 fields, found {}", v.len()),
            });
        }
        let sample = ImuSample {
            t: v[0],
            accel: Vec3::new(v[1], v[2], v[3]),
            gyro: Vec3::new(v[4], v[5], v[6]),
        };
        if let Some(prev) = out.last().map(|p: &ImuSample| p.t) {
            if !(sample.t > prev) {
                return Err(ImuError::Parse {
                    line: i + 1,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn save_imu_csv(samples: &[ImuSample], path: &Path) -> Result<(), ImuError> {
    std::fs::write(path, imu_to_csv(samples)).map_err(|source| ImuError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_imu_csv(path: &Path) -> Result<Vec<ImuSample>, ImuError> {
    let text = std::fs::read_to_string(path).map_err(|source| ImuError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_imu_csv(&text)
}
