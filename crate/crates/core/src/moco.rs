//! Strap-down motion estimation: IMU samples to per-projection motion
//! matrices.
//!
//! Pipeline, all at the IMU rate until resampling:
//!
//! 1. gyro increments `G_i`, the sensor-frame rotation over one interval;
//! 2. global orientation `R_{i+1} = R_i G_i` from the known initial pose,
//!    local gravity `g_i = R_i^T g` and gravity-free acceleration
//!    `a'_i = a_i + g_i`;
//! 3. per-interval displacement `u_i` in the sensor frame, propagated through
//!    the orientation change of each step;
//! 4. rates (`log G / dt`, `u / dt`) linearly resampled at the CT interval
//!    midpoints and turned back into increments;
//! 5. local increments `D_l = [G | u]` mapped to the global frame with the
//!    current pose, `D_g = S D_l S^-1`, `S_{k+1} = D_g S_k`, and accumulated
//!    into motion matrices `M_{k+1} = D_g M_k` with `M_0 = I`.
//!
//! `M_k` maps world points at the first view to their position at view `k`.
//! Units are meters and seconds; convert with [`MotionTrack::to_millimeters`]
//! before handing the track to the scan geometry.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::imusim::ImuSample;
use crate::se3::{RigidPose, Rotation3, Vec3, RENORMALIZE_EVERY};

#[derive(Debug, Error)]
pub enum MocoError {
    #[error("need at least two IMU samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample interval must be positive, got {0}")]
    InvalidInterval(f64),
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("CT instant {time} s not covered by IMU data [{start}, {end}] s")]
    NotCovered { time: f64, start: f64, end: f64 },
    #[error("CT instants must be strictly increasing")]
    NonMonotonicTimes,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("track csv line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// How IMU samples are paired with the sample intervals they drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// `G_i` from the mean rate of samples `i` and `i+1`; `u_{i+1}` takes
    /// the acceleration sampled at the shared instant `i+1`, and `u_0`
    /// includes the half-step acceleration term. Consistent to second order
    /// with centrally differenced sensor data.
    #[default]
    Aligned,
    /// Rectangle rule with each interval driven by the sample at its start:
    /// `G_i = exp(w_i dt)`, `u_{i+1} = G_i^T (a'_i dt^2 + u_i)`, `u_0 = v_0 dt`.
    Literal,
}

/// Rigid change over one sample interval, expressed in the sensor frame at
/// the start of the interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalIncrement {
    pub rotation: Rotation3,
    /// Displacement over the interval, meters.
    pub displacement: Vec3,
    pub dt: f64,
}

impl LocalIncrement {
    pub fn identity(dt: f64) -> Self {
        Self {
            rotation: Rotation3::identity(),
            displacement: Vec3::zeros(),
            dt,
        }
    }

    /// The affine matrix `[G | u]`.
    pub fn as_pose(&self) -> RigidPose {
        RigidPose::new(self.rotation, self.displacement)
    }
}

/// Sensor poses and motion matrices at the CT instants.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTrack {
    pub times: Vec<f64>,
    /// Sensor pose `S_k` in the global frame.
    pub sensor_poses: Vec<RigidPose>,
    /// Motion matrix `M_k`; `M_0` is the identity.
    pub motion: Vec<RigidPose>,
}

impl MotionTrack {
    pub fn len(&self) -> usize {
        self.motion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.is_empty()
    }

    /// Track of a body whose global pose at each instant is known:
    /// `M_k = P_k P_0^-1`.
    pub fn from_poses(times: Vec<f64>, poses: &[RigidPose]) -> Self {
        let inv0 = poses.first().map(RigidPose::inverse).unwrap_or_default();
        Self {
            times,
            sensor_poses: poses.to_vec(),
            motion: poses.iter().map(|p| p.compose(&inv0)).collect(),
        }
    }

    /// All-identity track of `n` views.
    pub fn identity(times: Vec<f64>) -> Self {
        let n = times.len();
        Self {
            times,
            sensor_poses: vec![RigidPose::identity(); n],
            motion: vec![RigidPose::identity(); n],
        }
    }

    /// Copy with translations scaled from meters to millimeters.
    pub fn to_millimeters(&self) -> Self {
        Self {
            times: self.times.clone(),
            sensor_poses: self.sensor_poses.iter().map(|p| p.scale_translation(1e3)).collect(),
            motion: self.motion.iter().map(|p| p.scale_translation(1e3)).collect(),
        }
    }
}

fn check_dt(dt: f64) -> Result<(), MocoError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(MocoError::InvalidInterval(dt))
    }
}

/// Sensor-frame rotation over each of the `n - 1` sample intervals.
pub fn gyro_increments(
    samples: &[ImuSample],
    dt: f64,
    scheme: Discretization,
) -> Result<Vec<Rotation3>, MocoError> {
    check_dt(dt)?;
    if samples.len() < 2 {
        return Err(MocoError::TooFewSamples(samples.len()));
    }
    Ok(samples
        .windows(2)
        .map(|w| {
            let rate = match scheme {
                Discretization::Aligned => (w[0].gyro + w[1].gyro) * 0.5,
                Discretization::Literal => w[0].gyro,
            };
            Rotation3::exp(&(rate * dt))
        })
        .collect())
}

/// Global sensor orientation at every sample, starting from `initial`.
pub fn orientations(initial: &Rotation3, increments: &[Rotation3]) -> Vec<Rotation3> {
    let mut out = Vec::with_capacity(increments.len() + 1);
    let mut r = *initial;
    out.push(r);
    for (i, g) in increments.iter().enumerate() {
        r = r.compose(g);
        if (i + 1) % RENORMALIZE_EVERY == 0 {
            r = r.renormalized();
        }
        out.push(r);
    }
    out
}

/// Gravity-free specific force `a_i + R_i^T g` in the sensor frame.
pub fn remove_gravity(
    samples: &[ImuSample],
    initial: &RigidPose,
    increments: &[Rotation3],
    g: &Vec3,
) -> Result<Vec<Vec3>, MocoError> {
    if increments.len() + 1 != samples.len() {
        return Err(MocoError::LengthMismatch {
            what: "gyro increments",
            expected: samples.len().saturating_sub(1),
            got: increments.len(),
        });
    }
    let rot = orientations(&initial.rotation, increments);
    Ok(samples
        .iter()
        .zip(&rot)
        .map(|(s, r)| s.accel + r.transpose().apply(g))
        .collect())
}

/// Per-interval displacements in the sensor frame at each interval start.
/// `v0` is the initial velocity in the sensor frame (m/s).
pub fn integrate_velocity(
    gravity_free: &[Vec3],
    increments: &[Rotation3],
    v0: &Vec3,
    dt: f64,
    scheme: Discretization,
) -> Result<Vec<Vec3>, MocoError> {
    check_dt(dt)?;
    if increments.len() + 1 != gravity_free.len() {
        return Err(MocoError::LengthMismatch {
            what: "gyro increments",
            expected: gravity_free.len().saturating_sub(1),
            got: increments.len(),
        });
    }
    let dt2 = dt * dt;
    let mut out = Vec::with_capacity(increments.len());
    if increments.is_empty() {
        return Ok(out);
    }
    let mut u = match scheme {
        Discretization::Aligned => v0 * dt + gravity_free[0] * (0.5 * dt2),
        Discretization::Literal => v0 * dt,
    };
    out.push(u);
    for i in 0..increments.len() - 1 {
        let gt = increments[i].transpose();
        u = match scheme {
            Discretization::Aligned => gt.apply(&u) + gravity_free[i + 1] * dt2,
            Discretization::Literal => gt.apply(&(gravity_free[i] * dt2 + u)),
        };
        out.push(u);
    }
    Ok(out)
}

/// Local increments at the IMU rate. `initial` is the sensor pose at
/// `samples[0].t`; `v0` the sensor-frame velocity at that instant.
pub fn imu_increments(
    samples: &[ImuSample],
    initial: &RigidPose,
    v0: &Vec3,
    g: &Vec3,
    scheme: Discretization,
) -> Result<Vec<LocalIncrement>, MocoError> {
    if samples.len() < 2 {
        return Err(MocoError::TooFewSamples(samples.len()));
    }
    let dt = (samples[samples.len() - 1].t - samples[0].t) / (samples.len() - 1) as f64;
    let rotations = gyro_increments(samples, dt, scheme)?;
    let free = remove_gravity(samples, initial, &rotations, g)?;
    let disp = integrate_velocity(&free, &rotations, v0, dt, scheme)?;
    Ok(rotations
        .into_iter()
        .zip(disp)
        .map(|(rotation, displacement)| LocalIncrement {
            rotation,
            displacement,
            dt,
        })
        .collect())
}

/// Exact increments between consecutive known poses (no sensing involved).
pub fn increments_from_poses(poses: &[RigidPose], dt: f64) -> Vec<LocalIncrement> {
    poses
        .windows(2)
        .map(|w| {
            let rel = w[0].inverse().compose(&w[1]);
            LocalIncrement {
                rotation: rel.rotation,
                displacement: rel.translation,
                dt,
            }
        })
        .collect()
}

/// Resamples increments that start at `start` (uniform spacing) onto the CT
/// intervals `[t_k, t_{k+1}]`: rates are interpolated linearly at each CT
/// interval midpoint and multiplied by the CT interval length.
pub fn resample_increments(
    increments: &[LocalIncrement],
    start: f64,
    ct_times: &[f64],
) -> Result<Vec<LocalIncrement>, MocoError> {
    if increments.is_empty() {
        return Err(MocoError::TooFewSamples(increments.len() + 1));
    }
    let dt = increments[0].dt;
    check_dt(dt)?;
    if ct_times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(MocoError::NonMonotonicTimes);
    }
    let rates: Vec<(Vec3, Vec3)> = increments
        .iter()
        .map(|inc| (inc.rotation.log() / inc.dt, inc.displacement / inc.dt))
        .collect();
    let n = rates.len();
    let end = start + n as f64 * dt;
    let slack = 1e-9 * dt;
    for &t in [ct_times.first(), ct_times.last()].iter().flatten() {
        if *t < start - slack || *t > end + slack {
            return Err(MocoError::NotCovered { time: *t, start, end });
        }
    }
    Ok(ct_times
        .windows(2)
        .map(|w| {
            let span = w[1] - w[0];
            let mid = 0.5 * (w[0] + w[1]);
            // rate i is centred at start + (i + 1/2) dt
            let x = ((mid - start) / dt - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (x.floor() as usize).min(n - 1);
            let frac = x - i0 as f64;
            let (w_rate, v_rate) = if frac == 0.0 || i0 + 1 == n {
                rates[i0]
            } else {
                let (w0, v0) = rates[i0];
                let (w1, v1) = rates[i0 + 1];
                (w0 + (w1 - w0) * frac, v0 + (v1 - v0) * frac)
            };
            LocalIncrement {
                rotation: Rotation3::exp(&(w_rate * span)),
                displacement: v_rate * span,
                dt: span,
            }
        })
        .collect())
}

/// Global pose propagation and motion-matrix accumulation.
pub fn propagate(increments: &[LocalIncrement], initial: &RigidPose, times: Vec<f64>) -> Result<MotionTrack, MocoError> {
    if times.len() != increments.len() + 1 {
        return Err(MocoError::LengthMismatch {
            what: "track times",
            expected: increments.len() + 1,
            got: times.len(),
        });
    }
    let mut sensor = *initial;
    let mut motion = RigidPose::identity();
    let mut sensor_poses = Vec::with_capacity(times.len());
    let mut motions = Vec::with_capacity(times.len());
    sensor_poses.push(sensor);
    motions.push(motion);
    for (k, inc) in increments.iter().enumerate() {
        let next = sensor.compose(&inc.as_pose());
        // D_g = S_{k+1} S_k^-1, identical to S_k D_l S_k^-1
        let global = next.compose(&sensor.inverse());
        sensor = next;
        motion = global.compose(&motion);
        if (k + 1) % RENORMALIZE_EVERY == 0 {
            sensor = sensor.renormalized();
            motion = motion.renormalized();
        }
        sensor_poses.push(sensor);
        motions.push(motion);
    }
    Ok(MotionTrack {
        times,
        sensor_poses,
        motion: motions,
    })
}

/// Options of the full IMU-to-track pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrapdownOptions {
    pub gravity: Vec3,
    pub scheme: Discretization,
}

impl Default for StrapdownOptions {
    fn default() -> Self {
        Self {
            gravity: crate::imusim::gravity(),
            scheme: Discretization::Aligned,
        }
    }
}

/// IMU samples to a motion track at `ct_times`. The samples must start at
/// the instant where `initial` (sensor pose) and `v0` (sensor-frame
/// velocity) hold, and cover every CT instant.
pub fn estimate_track(
    samples: &[ImuSample],
    initial: &RigidPose,
    v0: &Vec3,
    ct_times: &[f64],
    options: &StrapdownOptions,
) -> Result<MotionTrack, MocoError> {
    let dense = imu_increments(samples, initial, v0, &options.gravity, options.scheme)?;
    let start = samples[0].t;
    if let Some(&t0) = ct_times.first() {
        if (t0 - start).abs() > 1e-9 {
            return Err(MocoError::NotCovered {
                time: t0,
                start,
                end: samples[samples.len() - 1].t,
            });
        }
    }
    let ct = resample_increments(&dense, start, ct_times)?;
    propagate(&ct, initial, ct_times.to_vec())
}

/// CSV with one row per view: `i` and the 12 entries of the upper 3x4
/// block of `M_i`, row-major.
pub fn track_to_csv(track: &MotionTrack) -> String {
    let mut out = String::from("i");
    for r in 0..3 {
        for c in 0..4 {
            let _ = write!(out, ",m{r}{c}");
        }
    }
    out.push('\n');
    for (i, m) in track.motion.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in m.to_row_major_12() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses [`track_to_csv`] output. Only motion matrices are stored, so the
/// returned track has identity sensor poses and index-valued times.
pub fn parse_track_csv(text: &str) -> Result<MotionTrack, MocoError> {
    let mut motion = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let fields = fields.map_err(|e| MocoError::Parse {
            line: line_no + 1,
            message: e.to_string(),
        })?;
        if fields.len() != 13 {
            return Err(MocoError::Parse {
                line: line_no + 1,
                message: format!("expected 13 fields, found {}", fields.len()),
            });
        }
        if fields[0] as usize != motion.len() {
            return Err(MocoError::Parse {
                line: line_no + 1,
                message: "row index out of sequence".into(),
            });
        }
        let mut m = [0.0; 12];
        m.copy_from_slice(&fields[1..]);
        motion.push(RigidPose::from_row_major_12(&m));
    }
    let n = motion.len();
    Ok(MotionTrack {
        times: (0..n).map(|i| i as f64).collect(),
        sensor_poses: vec![RigidPose::identity(); n],
        motion,
    })
}

pub fn save_track_csv(track: &MotionTrack, path: &Path) -> Result<(), MocoError> {
    std::fs::write(path, track_to_csv(track)).map_err(|source| MocoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_track_csv(path: &Path) -> Result<MotionTrack, MocoError> {
    let text = std::fs::read_to_string(path).map_err(|source| MocoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_track_csv(&text)
}
