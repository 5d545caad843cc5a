//! Ground-truth leg motion: a two-segment (thigh, shank) kinematic chain
//! driven by generalized coordinates.
//!
//! World frame: x anterior, y up (gravity along -y), z lateral. Lengths are
//! meters, angles radians, time seconds.
//!
//! Angle conventions, used everywhere:
//! * root orientation is intrinsic Euler X-Y-Z: `Rx(rx) * Ry(ry) * Rz(rz)`;
//! * the hip triple is `Rz(flexion) * Rx(adduction) * Ry(rotation)`;
//! * knee flexion rotates the shank by `Rz(-knee_flex)`, so positive flexion
//!   moves the ankle posterior.
//!
//! In the reference posture both segments hang along -y from the hip.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::se3::{RigidPose, Rotation3, Vec3};

/// Column names of the generalized-coordinate CSV, after the leading `t`.
pub const CHANNELS: [&str; 10] = [
    "root_x", "root_y", "root_z", "root_rx", "root_ry", "root_rz", "hip_flex", "hip_add", "hip_rot",
    "knee_flex",
];

/// Channels holding angles (indices into [`CHANNELS`]).
const ANGLE_CHANNELS: std::ops::Range<usize> = 3..10;

pub const DEFAULT_SAMPLE_RATE: f64 = 120.0;
pub const DEFAULT_SMOOTHING_SPAN: usize = 60;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("sample rate must be positive, got {0}")]
    InvalidSampleRate(f64),
    #[error("sample {sample}: channel {channel} angle {value} outside [-pi, pi]")]
    AngleOutOfRange {
        sample: usize,
        channel: &'static str,
        value: f64,
    },
    #[error("sway duration {duration} s is shorter than the scan ({required} s)")]
    DurationTooShort { duration: f64, required: f64 },
    #[error("invalid sway parameters: {0}")]
    InvalidSway(String),
    #[error("smoothing span {span} invalid for {samples} samples")]
    InvalidSpan { span: usize, samples: usize },
    #[error("segment lengths must be positive")]
    InvalidAnthropometry,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: missing channel column `{0}`")]
    MissingChannel(String),
    #[error("csv line {line}: expected {expected} fields, found {found}")]
    MalformedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("csv line {line}, column `{column}`: cannot parse `{cell}` as a number")]
    ParseCell {
        line: u64,
        column: String,
        cell: String,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("csv: samples are not uniformly spaced at line {line}")]
    NonUniform { line: u64 },
    #[error("csv: need at least two samples to infer the sample rate")]
    TooFewSamples,
    #[error("resampling time {time} s outside [{start}, {end}] s")]
    OutOfRange { time: f64, start: f64, end: f64 },
}

/// One sample of the generalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoordSample {
    /// Root (left hip joint center) position, meters.
    pub root_position: Vec3,
    /// Root orientation, Euler X-Y-Z, radians.
    pub root_orientation: Vec3,
    /// Hip (flexion, adduction, rotation), radians.
    pub hip: Vec3,
    pub knee_flex: f64,
}

impl CoordSample {
    pub fn to_array(&self) -> [f64; 10] {
        let p = &self.root_position;
        let o = &self.root_orientation;
        let h = &self.hip;
        [p.x, p.y, p.z, o.x, o.y, o.z, h.x, h.y, h.z, self.knee_flex]
    }

    pub fn from_array(a: &[f64; 10]) -> Self {
        Self {
            root_position: Vec3::new(a[0], a[1], a[2]),
            root_orientation: Vec3::new(a[3], a[4], a[5]),
            hip: Vec3::new(a[6], a[7], a[8]),
            knee_flex: a[9],
        }
    }

    /// Static squat: knee flexed by `knee_flex`, hip flexed by half of it so the
    /// knee sits anterior of both hip and ankle.
    pub fn squat(root_position: Vec3, knee_flex: f64) -> Self {
        Self {
            root_position,
            root_orientation: Vec3::zeros(),
            hip: Vec3::new(0.5 * knee_flex, 0.0, 0.0),
            knee_flex,
        }
    }
}

/// Uniformly sampled generalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedCoords {
    pub start_time: f64,
    pub sample_rate: f64,
    pub samples: Vec<CoordSample>,
}

impl GeneralizedCoords {
    pub fn new(start_time: f64, sample_rate: f64, samples: Vec<CoordSample>) -> Result<Self, MotionError> {
        let coords = Self {
            start_time,
            sample_rate,
            samples,
        };
        coords.validate()?;
        Ok(coords)
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(MotionError::InvalidSampleRate(self.sample_rate));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let a = s.to_array();
            for c in ANGLE_CHANNELS {
                if !(a[c].abs() <= std::f64::consts::PI) {
                    return Err(MotionError::AngleOutOfRange {
                        sample: i,
                        channel: CHANNELS[c],
                        value: a[c],
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start_time + i as f64 / self.sample_rate
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.samples.len().saturating_sub(1))
    }

    /// Linear interpolation of every channel at `n` instants
    /// `start + k / rate`.
    pub fn resample_uniform(&self, start: f64, rate: f64, n: usize) -> Result<Self, MotionError> {
        if !(rate > 0.0) {
            return Err(MotionError::InvalidSampleRate(rate));
        }
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            out.push(self.interpolate(start + k as f64 / rate)?);
        }
        Ok(Self {
            start_time: start,
            sample_rate: rate,
            samples: out,
        })
    }

    /// Channel values at time `t` by linear interpolation.
    pub fn interpolate(&self, t: f64) -> Result<CoordSample, MotionError> {
        let n = self.samples.len();
        let (start, end) = (self.start_time, self.end_time());
        let slack = 1e-9 * self.dt();
        if n == 0 || t < start - slack || t > end + slack {
            return Err(MotionError::OutOfRange { time: t, start, end });
        }
        let x = ((t - start) * self.sample_rate).clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n - 1);
        let frac = x - i0 as f64;
        if i0 + 1 >= n || frac == 0.0 {
            return Ok(self.samples[i0]);
        }
        let a = self.samples[i0].to_array();
        let b = self.samples[i0 + 1].to_array();
        let mut c = [0.0; 10];
        for j in 0..10 {
            c[j] = a[j] + (b[j] - a[j]) * frac;
        }
        Ok(CoordSample::from_array(&c))
    }
}

/// Sway of one channel: amplitude (m or rad), base frequency (Hz), phase (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SwayChannel {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Parameters of the synthetic sway generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SwayParams {
    /// One entry per [`CHANNELS`] entry.
    pub channels: [SwayChannel; 10],
    /// Posture the sway is superposed on.
    pub base: CoordSample,
    pub duration: f64,
    pub sample_rate: f64,
    /// Shortest acceptable duration (the scan length plus any lead-in).
    pub required_duration: f64,
}

impl Default for SwayParams {
    fn default() -> Self {
        Self {
            channels: [SwayChannel::default(); 10],
            base: CoordSample::squat(Vec3::new(0.0, 0.85, 0.0), 30f64.to_radians()),
            duration: 9.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            required_duration: 248.0 / 31.0,
        }
    }
}

impl SwayParams {
    pub fn channel_mut(&mut self, name: &str) -> Option<&mut SwayChannel> {
        CHANNELS.iter().position(|c| *c == name).map(|i| &mut self.channels[i])
    }
}

/// Synthetic sway: each channel is 2-4 harmonics of its base frequency with
/// seeded random phases, rescaled so its peak-to-peak excursion is exactly
/// twice the configured amplitude, and centered on the base posture.
pub fn generate_sway(params: &SwayParams, seed: u64) -> Result<GeneralizedCoords, MotionError> {
    if !(params.sample_rate > 0.0) {
        return Err(MotionError::InvalidSampleRate(params.sample_rate));
    }
    if params.duration < params.required_duration {
        return Err(MotionError::DurationTooShort {
            duration: params.duration,
            required: params.required_duration,
        });
    }
    for (name, ch) in CHANNELS.iter().zip(&params.channels) {
        if !(ch.amplitude >= 0.0) || !ch.amplitude.is_finite() {
            return Err(MotionError::InvalidSway(format!("{name}: amplitude must be >= 0")));
        }
        if ch.amplitude > 0.0 && !(ch.frequency > 0.0) {
            return Err(MotionError::InvalidSway(format!("{name}: frequency must be > 0")));
        }
    }

    let n = (params.duration * params.sample_rate).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / params.sample_rate).collect();
    let base = params.base.to_array();
    let mut rows = vec![base; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (c, ch) in params.channels.iter().enumerate() {
        // draw unconditionally so channel c's randomness does not depend on others
        let harmonics: usize = rng.random_range(2..=4);
        let phases: Vec<f64> = (0..harmonics)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        if ch.amplitude == 0.0 {
            continue;
        }
        let raw: Vec<f64> = times
            .iter()
            .map(|&t| {
                phases
                    .iter()
                    .enumerate()
                    .map(|(h, ph)| {
                        let order = (h + 1) as f64;
                        (std::f64::consts::TAU * order * ch.frequency * t + ch.phase + ph).sin() / order
                    })
                    .sum::<f64>()
            })
            .collect();
        let (lo, hi) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi - lo <= 0.0 {
            continue;
        }
        let scale = 2.0 * ch.amplitude / (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (row, v) in rows.iter_mut().zip(&raw) {
            row[c] += (v - mid) * scale;
        }
    }

    GeneralizedCoords::new(
        0.0,
        params.sample_rate,
        rows.iter().map(CoordSample::from_array).collect(),
    )
}

/// Centered moving average per channel. Even spans use the window
/// `[i - (span/2 - 1), i + span/2]`; near the ends the window shrinks to the
/// largest symmetric one that fits, so the output has the input's length.
pub fn smooth(coords: &GeneralizedCoords, span: usize) -> Result<GeneralizedCoords, MotionError> {
    let n = coords.len();
    if span < 1 || span > n {
        return Err(MotionError::InvalidSpan { span, samples: n });
    }
    let hi = span / 2;
    let lo = span - 1 - hi;
    let data: Vec<[f64; 10]> = coords.samples.iter().map(CoordSample::to_array).collect();
    let samples = (0..n)
        .map(|i| {
            let (a, b) = if i >= lo && i + hi < n {
                (i - lo, i + hi)
            } else {
                let k = i.min(n - 1 - i);
                (i - k, i + k)
            };
            let len = (b - a + 1) as f64;
            let mut out = [0.0; 10];
            for (c, o) in out.iter_mut().enumerate() {
                *o = data[a..=b].iter().map(|r| r[c]).sum::<f64>() / len;
            }
            CoordSample::from_array(&out)
        })
        .collect();
    Ok(GeneralizedCoords {
        start_time: coords.start_time,
        sample_rate: coords.sample_rate,
        samples,
    })
}

/// Segment lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anthropometry {
    /// Hip joint center to knee joint center.
    pub thigh_length: f64,
    /// Knee joint center to ankle joint center.
    pub shank_length: f64,
}

impl Default for Anthropometry {
    fn default() -> Self {
        Self {
            thigh_length: 0.42,
            shank_length: 0.43,
        }
    }
}

/// Which segment a body-fixed object is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Thigh,
    Shank,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Thigh => "thigh",
            Segment::Shank => "shank",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "thigh" => Some(Segment::Thigh),
            "shank" => Some(Segment::Shank),
            _ => None,
        }
    }
}

/// Segment poses and joint centers over time (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTrajectory {
    pub start_time: f64,
    pub sample_rate: f64,
    /// Thigh frame: origin at the hip joint center.
    pub thigh: Vec<RigidPose>,
    /// Shank frame: origin at the knee joint center.
    pub shank: Vec<RigidPose>,
    pub hip: Vec<Vec3>,
    pub knee: Vec<Vec3>,
    pub ankle: Vec<Vec3>,
    pub anthropometry: Anthropometry,
}

impl SegmentTrajectory {
    pub fn len(&self) -> usize {
        self.thigh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thigh.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn time(&self, i: usize) -> f64 {
        self.start_time + i as f64 / self.sample_rate
    }

    pub fn segment(&self, segment: Segment) -> &[RigidPose] {
        match segment {
            Segment::Thigh => &self.thigh,
            Segment::Shank => &self.shank,
        }
    }

    /// Sub-range of samples `[from, from + len)`.
    pub fn slice(&self, from: usize, len: usize) -> Self {
        let r = from..from + len;
        Self {
            start_time: self.time(from),
            sample_rate: self.sample_rate,
            thigh: self.thigh[r.clone()].to_vec(),
            shank: self.shank[r.clone()].to_vec(),
            hip: self.hip[r.clone()].to_vec(),
            knee: self.knee[r.clone()].to_vec(),
            ankle: self.ankle[r].to_vec(),
            anthropometry: self.anthropometry,
        }
    }
}

/// Root pose of one sample.
pub fn root_pose(s: &CoordSample) -> RigidPose {
    let o = &s.root_orientation;
    RigidPose::new(Rotation3::from_euler_xyz(o.x, o.y, o.z), s.root_position)
}

/// Hip joint rotation of one sample.
pub fn hip_rotation(s: &CoordSample) -> Rotation3 {
    Rotation3::about_z(s.hip.x)
        .compose(&Rotation3::about_x(s.hip.y))
        .compose(&Rotation3::about_y(s.hip.z))
}

/// (thigh pose, shank pose) of one sample.
pub fn segment_poses(s: &CoordSample, body: &Anthropometry) -> (RigidPose, RigidPose) {
    let thigh = root_pose(s).compose(&RigidPose::from_rotation(hip_rotation(s)));
    let knee_offset = RigidPose::from_translation(Vec3::new(0.0, -body.thigh_length, 0.0));
    let knee_joint = RigidPose::from_rotation(Rotation3::about_z(-s.knee_flex));
    let shank = thigh.compose(&knee_offset).compose(&knee_joint);
    (thigh, shank)
}

pub fn forward_kinematics(
    coords: &GeneralizedCoords,
    body: &Anthropometry,
) -> Result<SegmentTrajectory, MotionError> {
    if !(body.thigh_length > 0.0 && body.shank_length > 0.0) {
        return Err(MotionError::InvalidAnthropometry);
    }
    let n = coords.len();
    let mut traj = SegmentTrajectory {
        start_time: coords.start_time,
        sample_rate: coords.sample_rate,
        thigh: Vec::with_capacity(n),
        shank: Vec::with_capacity(n),
        hip: Vec::with_capacity(n),
        knee: Vec::with_capacity(n),
        ankle: Vec::with_capacity(n),
        anthropometry: *body,
    };
    let ankle_local = Vec3::new(0.0, -body.shank_length, 0.0);
    for s in &coords.samples {
        let (thigh, shank) = segment_poses(s, body);
        traj.hip.push(thigh.translation);
        traj.knee.push(shank.translation);
        traj.ankle.push(shank.transform_point(&ankle_local));
        traj.thigh.push(thigh);
        traj.shank.push(shank);
    }
    Ok(traj)
}

/// Writes coordinates as CSV in meters and radians.
pub fn save_coords_csv(coords: &GeneralizedCoords, path: &Path) -> Result<(), MotionError> {
    std::fs::write(path, coords_to_csv(coords)).map_err(|source| MotionError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn coords_to_csv(coords: &GeneralizedCoords) -> String {
    let mut out = String::from("# units: m,rad\nt");
    for c in CHANNELS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, s) in coords.samples.iter().enumerate() {
        let _ = write!(out, "{}", coords.time(i));
        for v in s.to_array() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn load_coords_csv(path: &Path) -> Result<GeneralizedCoords, MotionError> {
    let text = std::fs::read_to_string(path).map_err(|source| MotionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_coords_csv(&text)
}

/// Parses the generalized-coordinate CSV. A `# units: <length>,<angle>`
/// comment selects degrees when the angle unit is `deg`.
pub fn parse_coords_csv(text: &str) -> Result<GeneralizedCoords, MotionError> {
    let mut degrees = false;
    for line in text.lines() {
        let l = line.trim();
        if let Some(rest) = l.strip_prefix('#') {
            if let Some(units) = rest.trim().strip_prefix("units:") {
                degrees = units
                    .split(',')
                    .map(str::trim)
                    .any(|u| u.eq_ignore_ascii_case("deg") || u.eq_ignore_ascii_case("degrees"));
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| MotionError::Csv(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MotionError::MissingChannel(name.to_string()))
    };
    let t_col = column("t")?;
    let mut cols = [0usize; 10];
    for (c, name) in CHANNELS.iter().enumerate() {
        cols[c] = column(name)?;
    }

    let mut times = Vec::new();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| MotionError::Csv(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(MotionError::MalformedRow {
                line,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let parse = |idx: usize| -> Result<f64, MotionError> {
            let cell = &record[idx];
            cell.parse::<f64>().map_err(|_| MotionError::ParseCell {
                line,
                column: headers[idx].to_string(),
                cell: cell.to_string(),
            })
        };
        times.push((line, parse(t_col)?));
        let mut a = [0.0; 10];
        for c in 0..10 {
            a[c] = parse(cols[c])?;
            if degrees && ANGLE_CHANNELS.contains(&c) {
                a[c] = a[c].to_radians();
            }
        }
        samples.push(CoordSample::from_array(&a));
    }
    if times.len() < 2 {
        return Err(MotionError::TooFewSamples);
    }
    let dt = times[1].1 - times[0].1;
    if !(dt > 0.0) {
        return Err(MotionError::NonUniform { line: times[1].0 });
    }
    for w in times.windows(2) {
        if ((w[1].1 - w[0].1) - dt).abs() > 1e-6 * dt.max(1e-3) {
            return Err(MotionError::NonUniform { line: w[1].0 });
        }
    }
    let span = times[times.len() - 1].1 - times[0].1;
    let rate = (times.len() - 1) as f64 / span;
    GeneralizedCoords::new(times[0].1, rate, samples)
}
