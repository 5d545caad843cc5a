//! Experiment runner: configuration, the four-arm comparison (static,
//! uncorrected, IMU-corrected, marker-corrected), artifact output and the
//! aggregate results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{build_trajectory, ScanGeometry};
use crate::imusim::{self, ImuErrorModel, SensorMount};
use crate::io;
use crate::markerbase::{self, GaussNewtonOptions};
use crate::metrics::{percentile, Evaluator, QualityReport};
use crate::moco::{self, MotionTrack, StrapdownOptions};
use crate::motion::{self, Anthropometry, CoordSample, GeneralizedCoords, SwayParams, CHANNELS};
use crate::phantom::default_leg_phantom;
use crate::projector::{default_markers, marker_positions, project_markers, render_scan};
use crate::recon::{reconstruct, VolumeSpec, VoxelVolume};
use crate::se3::Vec3;

pub const MANIFEST_SCHEMA: u32 = 1;
pub const ARMS: [&str; 3] = ["uncorrected", "proposed", "marker"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("a seed is required (config key `seed` or --seed)")]
    MissingSeed,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Stage { .. } => 3,
        }
    }
}

fn stage<T, E: std::fmt::Display>(name: &'static str, r: Result<T, E>) -> Result<T, ExperimentError> {
    r.map_err(|e| ExperimentError::Stage {
        stage: name,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 310x240 detector, 124 views, 128^3 volume at 2 mm.
    #[default]
    Desk,
    /// Desk detector with a 256^3 volume at 1 mm.
    Desk256,
    /// Full-resolution geometry with a 512^3 volume at 0.5 mm.
    Full,
}

impl Preset {
    pub fn geometry(self) -> ScanGeometry {
        match self {
            Preset::Desk | Preset::Desk256 => ScanGeometry::desk(),
            Preset::Full => ScanGeometry::default(),
        }
    }

    /// (voxels per side, spacing in mm).
    pub fn volume(self) -> (usize, f64) {
        match self {
            Preset::Desk => (128, 2.0),
            Preset::Desk256 => (256, 1.0),
            Preset::Full => (512, 0.5),
        }
    }
}

/// Flat experiment configuration. Lengths in mm, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub preset: Preset,
    pub squat_deg: f64,
    /// Generalized-coordinate CSV replacing the synthetic sway.
    pub motion_csv: Option<PathBuf>,
    pub sway_frequency_hz: f64,
    pub amp_root_x_mm: f64,
    pub amp_root_y_mm: f64,
    pub amp_root_z_mm: f64,
    pub amp_root_rx_deg: f64,
    pub amp_root_ry_deg: f64,
    pub amp_root_rz_deg: f64,
    pub amp_hip_flex_deg: f64,
    pub amp_hip_add_deg: f64,
    pub amp_hip_rot_deg: f64,
    pub amp_knee_flex_deg: f64,
    pub smoothing_span: usize,
    pub imu_rate_hz: f64,
    /// IMU samples before the first view.
    pub lead_in_samples: usize,
    pub imu_accel_sigma: f64,
    pub imu_gyro_sigma: f64,
    pub imu_accel_bias: [f64; 3],
    pub imu_gyro_bias: [f64; 3],
    pub marker_sigma_px: f64,
    pub mask_threshold: f64,
    pub n_views: Option<usize>,
    pub angular_step_deg: Option<f64>,
    pub frame_rate_hz: Option<f64>,
    pub volume_n: Option<usize>,
    pub voxel_mm: Option<f64>,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub save_volumes: bool,
    /// Output directory; not part of the configuration hash.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            preset: Preset::Desk,
            squat_deg: 30.0,
            motion_csv: None,
            sway_frequency_hz: 0.25,
            amp_root_x_mm: 5.0,
            amp_root_y_mm: 2.0,
            amp_root_z_mm: 5.0,
            amp_root_rx_deg: 0.5,
            amp_root_ry_deg: 1.0,
            amp_root_rz_deg: 0.5,
            amp_hip_flex_deg: 0.5,
            amp_hip_add_deg: 0.3,
            amp_hip_rot_deg: 0.3,
            amp_knee_flex_deg: 0.5,
            smoothing_span: motion::DEFAULT_SMOOTHING_SPAN,
            imu_rate_hz: motion::DEFAULT_SAMPLE_RATE,
            lead_in_samples: 60,
            imu_accel_sigma: 0.0,
            imu_gyro_sigma: 0.0,
            imu_accel_bias: [0.0; 3],
            imu_gyro_bias: [0.0; 3],
            marker_sigma_px: 0.0,
            mask_threshold: crate::metrics::DEFAULT_MASK_THRESHOLD,
            n_views: None,
            angular_step_deg: None,
            frame_rate_hz: None,
            volume_n: None,
            voxel_mm: None,
            workers: 0,
            save_volumes: false,
            out: PathBuf::from("run"),
        }
    }
}

/// Parses one `key=value` override. Values that are not valid TOML are
/// taken as strings, so `out=runs/a` works unquoted.
fn parse_override(s: &str) -> Result<(String, toml::Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::BadOverride(s.to_string()));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", v.trim())) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(v.trim().to_string()),
    };
    Ok((k.to_string(), value))
}

impl ExperimentConfig {
    /// Defaults, overlaid by the file's keys, overlaid by `key=value`
    /// overrides.
    pub fn from_sources(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Syntax(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with `key=value` overrides applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn amplitudes(&self) -> [f64; 10] {
        let mm = 1e-3;
        let deg = 1f64.to_radians();
        [
            self.amp_root_x_mm * mm,
            self.amp_root_y_mm * mm,
            self.amp_root_z_mm * mm,
            self.amp_root_rx_deg * deg,
            self.amp_root_ry_deg * deg,
            self.amp_root_rz_deg * deg,
            self.amp_hip_flex_deg * deg,
            self.amp_hip_add_deg * deg,
            self.amp_hip_rot_deg * deg,
            self.amp_knee_flex_deg * deg,
        ]
    }

    /// Same configuration with every sway amplitude set to zero.
    pub fn without_sway(mut self) -> Self {
        self.amp_root_x_mm = 0.0;
        self.amp_root_y_mm = 0.0;
        self.amp_root_z_mm = 0.0;
        self.amp_root_rx_deg = 0.0;
        self.amp_root_ry_deg = 0.0;
        self.amp_root_rz_deg = 0.0;
        self.amp_hip_flex_deg = 0.0;
        self.amp_hip_add_deg = 0.0;
        self.amp_hip_rot_deg = 0.0;
        self.amp_knee_flex_deg = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.motion_csv.is_some() && self.amplitudes().iter().any(|&a| a != 0.0) {
            return bad("motion_csv and nonzero sway amplitudes are both set; choose one motion source".into());
        }
        for (name, a) in CHANNELS.iter().zip(self.amplitudes()) {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("amplitude for {name} must be >= 0"));
            }
        }
        if !(self.sway_frequency_hz > 0.0) {
            return bad("sway_frequency_hz must be > 0".into());
        }
        if !(0.0..=120.0).contains(&self.squat_deg) {
            return bad(format!("squat_deg {} outside [0, 120]", self.squat_deg));
        }
        if self.smoothing_span == 0 {
            return bad("smoothing_span must be >= 1".into());
        }
        if !(self.imu_rate_hz > 0.0) {
            return bad("imu_rate_hz must be > 0".into());
        }
        if self.lead_in_samples < 2 {
            return bad("lead_in_samples must be >= 2".into());
        }
        for (name, s) in [
            ("imu_accel_sigma", self.imu_accel_sigma),
            ("imu_gyro_sigma", self.imu_gyro_sigma),
            ("marker_sigma_px", self.marker_sigma_px),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return bad("mask_threshold must be in [0, 1)".into());
        }
        self.geometry().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let spec = self.volume_spec(Vec3::zeros());
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn geometry(&self) -> ScanGeometry {
        let mut g = self.preset.geometry();
        if let Some(n) = self.n_views {
            g.n_views = n;
        }
        if let Some(s) = self.angular_step_deg {
            g.angular_step = s;
        }
        if let Some(f) = self.frame_rate_hz {
            g.frame_rate = f;
        }
        g
    }

    pub fn volume_spec(&self, center: Vec3) -> VolumeSpec {
        let (n, s) = self.preset.volume();
        VolumeSpec::centered(self.volume_n.unwrap_or(n), self.voxel_mm.unwrap_or(s), center)
    }

    /// SHA-256 of the configuration without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }

    fn imu_error_model(&self, seed: u64) -> ImuErrorModel {
        ImuErrorModel {
            accel_noise_sigma: self.imu_accel_sigma,
            gyro_noise_sigma: self.imu_gyro_sigma,
            accel_bias: Vec3::from(self.imu_accel_bias),
            gyro_bias: Vec3::from(self.imu_gyro_bias),
            seed,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub ssim: f64,
    pub rmse: f64,
    pub ssim_improvement_pct: f64,
    pub rmse_improvement_pct: f64,
}

impl From<&QualityReport> for ArmResult {
    fn from(r: &QualityReport) -> Self {
        Self {
            arm: r.arm.clone(),
            ssim: r.ssim,
            rmse: r.rmse,
            ssim_improvement_pct: r.ssim_improvement_pct,
            rmse_improvement_pct: r.rmse_improvement_pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Run record. Stage wall-clock times go to `timings.json` so that the
/// manifest itself is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool_version: String,
    pub components: BTreeMap<String, String>,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub mask_voxels: usize,
    pub stages_completed: Vec<String>,
    pub failed_stage: Option<String>,
    pub results: Vec<ArmResult>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn components() -> BTreeMap<String, String> {
    let v = env!("CARGO_PKG_VERSION").to_string();
    [
        "se3",
        "motion",
        "imusim",
        "moco",
        "geometry",
        "phantom",
        "projector",
        "recon",
        "markerbase",
        "metrics",
        "experiment",
    ]
    .iter()
    .map(|c| (c.to_string(), v.clone()))
    .collect()
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub reports: Vec<QualityReport>,
    pub timings: BTreeMap<String, f64>,
    pub truth: MotionTrack,
    pub proposed: MotionTrack,
    pub marker: MotionTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Full,
    /// Motion, IMU and both tracks only; no projections or volumes.
    TracksOnly,
}

struct Recorder {
    out: PathBuf,
    files: Vec<PathBuf>,
    stages: Vec<String>,
    timings: BTreeMap<String, f64>,
    clock: Instant,
}

impl Recorder {
    fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            files: Vec::new(),
            stages: Vec::new(),
            timings: BTreeMap::new(),
            clock: Instant::now(),
        }
    }

    fn path(&mut self, rel: &str) -> PathBuf {
        let p = self.out.join(rel);
        self.files.push(PathBuf::from(rel));
        p
    }

    fn done(&mut self, name: &str) {
        self.timings.insert(name.to_string(), self.clock.elapsed().as_secs_f64());
        self.stages.push(name.to_string());
        self.clock = Instant::now();
    }

    fn inventory(&self) -> Result<Vec<FileEntry>, std::io::Error> {
        let mut files: Vec<&PathBuf> = self.files.iter().collect();
        files.sort();
        files.dedup();
        files
            .into_iter()
            .map(|rel| {
                let bytes = std::fs::read(self.out.join(rel))?;
                Ok(FileEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect()
    }
}

fn base_posture(cfg: &ExperimentConfig) -> CoordSample {
    CoordSample::squat(Vec3::new(0.0, 0.85, 0.0), cfg.squat_deg.to_radians())
}

/// Generalized coordinates at the IMU rate, covering the lead-in and scan.
fn motion_source(cfg: &ExperimentConfig, seed: u64, scan_duration: f64) -> Result<GeneralizedCoords, String> {
    let lead_in = cfg.lead_in_samples as f64 / cfg.imu_rate_hz;
    // one second of margin after the last view keeps the end stencils away
    let required = lead_in + scan_duration + 1.0;
    let coords = match &cfg.motion_csv {
        Some(p) => {
            let c = motion::load_coords_csv(p).map_err(|e| e.to_string())?;
            if c.end_time() - c.start_time < required {
                return Err(format!(
                    "motion file covers {:.3} s, need {required:.3} s",
                    c.end_time() - c.start_time
                ));
            }
            c
        }
        None => {
            let mut p = SwayParams {
                base: base_posture(cfg),
                duration: required,
                sample_rate: cfg.imu_rate_hz,
                required_duration: required,
                ..SwayParams::default()
            };
            for (ch, a) in p.channels.iter_mut().zip(cfg.amplitudes()) {
                ch.amplitude = a;
                ch.frequency = cfg.sway_frequency_hz;
            }
            motion::generate_sway(&p, seed).map_err(|e| e.to_string())?
        }
    };
    motion::smooth(&coords, cfg.smoothing_span).map_err(|e| e.to_string())
}

/// Runs the experiment and writes its artifacts under `cfg.out`.
pub fn run(cfg: &ExperimentConfig, mode: RunMode) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let seed = cfg.seed.ok_or(ConfigError::MissingSeed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("worker pool: {e}")))?;
    let mut rec = Recorder::new(&cfg.out);
    let result = pool.install(|| run_stages(cfg, seed, mode, &mut rec));
    // the manifest is written even after a stage failure
    let (reports, tracks, mask_voxels, failed) = match result {
        Ok((reports, tracks, mask)) => (reports, Some(tracks), mask, None),
        Err(e) => (Vec::new(), None, 0, Some(e)),
    };
    let manifest = write_manifest(cfg, seed, &rec, &reports, mask_voxels, failed.as_ref())?;
    if let Some(e) = failed {
        return Err(e);
    }
    let (truth, proposed, marker) = tracks.expect("tracks on success");
    Ok(RunOutcome {
        manifest,
        reports,
        timings: rec.timings,
        truth,
        proposed,
        marker,
    })
}

type Tracks = (MotionTrack, MotionTrack, MotionTrack);

fn run_stages(
    cfg: &ExperimentConfig,
    seed: u64,
    mode: RunMode,
    rec: &mut Recorder,
) -> Result<(Vec<QualityReport>, Tracks, usize), ExperimentError> {
    stage("output", std::fs::create_dir_all(cfg.out.join("slices")))?;
    std::fs::write(rec.path("config.toml"), {
        let mut c = cfg.clone();
        c.out = PathBuf::new();
        c.to_toml()
    })
    .map_err(|e| ExperimentError::Stage {
        stage: "output",
        message: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sway_seed, imu_seed, marker_seed): (u64, u64, u64) = (rng.random(), rng.random(), rng.random());

    // motion at the IMU rate and at the view times
    let mut geom = cfg.geometry();
    let scan = geom.scan_duration();
    let coords = stage("motion", motion_source(cfg, sway_seed, scan))?;
    let body = Anthropometry::default();
    let traj = stage("motion", motion::forward_kinematics(&coords, &body))?;
    let t0 = coords.time(cfg.lead_in_samples);
    let ct_times: Vec<f64> = (0..geom.n_views).map(|k| t0 + geom.view_time(k)).collect();
    let ct_coords = stage("motion", coords.resample_uniform(t0, geom.frame_rate, geom.n_views))?;
    let ct_traj = stage("motion", motion::forward_kinematics(&ct_coords, &body))?;
    geom.isocenter = ct_traj.knee[0] * 1e3;
    stage("motion", motion::save_coords_csv(&coords, &rec.path("coords.csv")))?;
    rec.done("motion");

    // ideal or corrupted IMU on the shank
    let mount = SensorMount::default();
    let imu_all = stage("imu", imusim::simulate_imu(&traj, &mount, &imusim::gravity()))?;
    let imu_all = stage("imu", imusim::corrupt(&imu_all, &cfg.imu_error_model(imu_seed)))?;
    let imu = &imu_all[cfg.lead_in_samples..];
    stage("imu", imusim::save_imu_csv(imu, &rec.path("imu.csv")))?;
    rec.done("imu");

    // strap-down track; initial sensor pose and velocity are known
    let sensor_poses = imusim::sensor_world_poses(&traj, &mount);
    let s0 = sensor_poses[cfg.lead_in_samples];
    let v0 = imusim::sensor_velocity(&sensor_poses, cfg.lead_in_samples, traj.dt());
    let proposed = stage(
        "moco",
        moco::estimate_track(imu, &s0, &v0, &ct_times, &StrapdownOptions::default()),
    )?
    .to_millimeters();
    let truth = MotionTrack::from_poses(ct_times.clone(), &imusim::sensor_world_poses(&ct_traj, &mount)).to_millimeters();
    stage("moco", moco::save_track_csv(&truth, &rec.path("track_truth.csv")))?;
    stage("moco", moco::save_track_csv(&proposed, &rec.path("track_proposed.csv")))?;
    rec.done("moco");

    // marker baseline
    let markers = default_markers();
    let detections = stage(
        "markers",
        project_markers(&markers, &ct_traj, &geom, cfg.marker_sigma_px, marker_seed),
    )?;
    let reference = marker_positions(&markers, &ct_traj, 0);
    let mats = stage("markers", build_trajectory(&geom))?;
    let estimate = stage(
        "markers",
        markerbase::estimate_motion(&detections, &reference, &mats, &GaussNewtonOptions::default()),
    )?;
    let marker = estimate.to_track(&ct_times);
    stage("markers", moco::save_track_csv(&marker, &rec.path("track_marker.csv")))?;
    rec.done("markers");

    if mode == RunMode::TracksOnly {
        return Ok((Vec::new(), (truth, proposed, marker), 0));
    }

    let prims = default_leg_phantom();
    let static_stack = stage("projections", render_scan(&prims, &ct_traj, &geom, false))?;
    let moving_stack = stage("projections", render_scan(&prims, &ct_traj, &geom, true))?;
    rec.done("projections");

    let spec = cfg.volume_spec(geom.isocenter);
    let volumes: Vec<(&str, VoxelVolume)> = vec![
        ("static", stage("reconstruction", reconstruct(&static_stack, &geom, None, &spec))?),
        ("uncorrected", stage("reconstruction", reconstruct(&moving_stack, &geom, None, &spec))?),
        ("proposed", stage("reconstruction", reconstruct(&moving_stack, &geom, Some(&proposed), &spec))?),
        ("marker", stage("reconstruction", reconstruct(&moving_stack, &geom, Some(&marker), &spec))?),
    ];
    drop(static_stack);
    drop(moving_stack);
    rec.done("reconstruction");

    let evaluator = stage("metrics", Evaluator::new(&volumes[0].1, cfg.mask_threshold))?;
    let reports = stage(
        "metrics",
        evaluator.compare(&volumes[1].1, &[("proposed", &volumes[2].1), ("marker", &volumes[3].1)]),
    )?;
    rec.done("metrics");

    let mut csv = String::from(QualityReport::CSV_HEADER);
    csv.push('\n');
    let mut report = String::new();
    let _ = writeln!(report, "seed={seed}");
    let _ = writeln!(report, "config_sha256={}", cfg.hash());
    let _ = writeln!(report, "mask_voxels={}", evaluator.mask.count());
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        report.push_str(&r.key_values());
    }
    stage("output", std::fs::write(rec.path("results.csv"), csv))?;
    stage("output", std::fs::write(rec.path("report.txt"), report))?;
    let window = {
        let lo = percentile(&volumes[0].1.data, crate::metrics::LOW_PERCENTILE);
        let hi = percentile(&volumes[0].1.data, crate::metrics::HIGH_PERCENTILE);
        (lo, hi)
    };
    for (name, vol) in &volumes {
        for (label, path) in slice_paths(name) {
            let p = rec.path(&path);
            stage("output", write_slice(vol, geom.isocenter, label, &p, window))?;
        }
        if cfg.save_volumes {
            let rel = format!("volumes/{name}.raw");
            stage("output", std::fs::create_dir_all(cfg.out.join("volumes")))?;
            let p = rec.path(&rel);
            stage("output", vol.save(&p))?;
            rec.files.push(PathBuf::from(format!("{rel}.meta")));
        }
    }
    rec.done("output");
    let mask = evaluator.mask.count();
    Ok((reports, (truth, proposed, marker), mask))
}

/// The three views used for inspection: an axial plane through the shank,
/// one through the thigh, and the sagittal plane through the knee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceKind {
    ShankAxial,
    ThighAxial,
    Sagittal,
}

/// Axial slices sit this far below and above the knee center, mm.
pub const AXIAL_OFFSET_MM: f64 = 50.0;

fn slice_paths(arm: &str) -> [(SliceKind, String); 3] {
    [
        (SliceKind::ShankAxial, format!("slices/{arm}_shank_axial.pgm")),
        (SliceKind::ThighAxial, format!("slices/{arm}_thigh_axial.pgm")),
        (SliceKind::Sagittal, format!("slices/{arm}_sagittal.pgm")),
    ]
}

/// Writes one slice as a 16-bit graymap with the given display window.
pub fn write_slice(vol: &VoxelVolume, knee: Vec3, kind: SliceKind, path: &Path, window: (f64, f64)) -> Result<(), io::IoError> {
    let s = &vol.spec;
    let [nx, ny, nz] = s.dims;
    let (w, h, pixels) = match kind {
        SliceKind::ShankAxial | SliceKind::ThighAxial => {
            let dy = if kind == SliceKind::ShankAxial { -AXIAL_OFFSET_MM } else { AXIAL_OFFSET_MM };
            let y = s.nearest_index(1, knee.y + dy);
            // row 0 of the image at the highest z
            let slice = vol.axial_slice(y);
            let flipped: Vec<f64> = slice.chunks_exact(nx).rev().flatten().copied().collect();
            (nx, nz, flipped)
        }
        SliceKind::Sagittal => {
            let z = s.nearest_index(2, knee.z);
            (nx, ny, vol.sagittal_slice(z))
        }
    };
    io::write_pgm16(path, w, h, &pixels, window.0, window.1)
}

fn write_manifest(
    cfg: &ExperimentConfig,
    seed: u64,
    rec: &Recorder,
    reports: &[QualityReport],
    mask_voxels: usize,
    failed: Option<&ExperimentError>,
) -> Result<RunManifest, ExperimentError> {
    let files = stage("manifest", rec.inventory())?;
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        components: components(),
        config_sha256: cfg.hash(),
        seed,
        workers: cfg.workers,
        mask_voxels,
        stages_completed: rec.stages.clone(),
        failed_stage: failed.map(|e| match e {
            ExperimentError::Stage { stage, .. } => stage.to_string(),
            ExperimentError::Config(_) => "config".to_string(),
        }),
        results: reports.iter().map(ArmResult::from).collect(),
        files,
    };
    if std::fs::create_dir_all(&cfg.out).is_ok() {
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        stage("manifest", std::fs::write(cfg.out.join("manifest.json"), json + "\n"))?;
        let timings = serde_json::to_string_pretty(&rec.timings).expect("timings serialize");
        stage("manifest", std::fs::write(cfg.out.join("timings.json"), timings + "\n"))?;
    }
    Ok(manifest)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub arm: String,
    pub ssim: (f64, f64),
    pub rmse: (f64, f64),
    pub ssim_improvement_pct: (f64, f64),
    pub rmse_improvement_pct: (f64, f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("no manifests given")]
    Empty,
    #[error("manifest {index}: {message}")]
    SchemaMismatch { index: usize, message: String },
}

/// Mean and standard deviation per arm and metric across runs.
pub fn compare(manifests: &[RunManifest]) -> Result<Vec<AggregateRow>, CompareError> {
    let first = manifests.first().ok_or(CompareError::Empty)?;
    let arms: Vec<&str> = first.results.iter().map(|r| r.arm.as_str()).collect();
    for (i, m) in manifests.iter().enumerate() {
        if m.schema != MANIFEST_SCHEMA {
            return Err(CompareError::SchemaMismatch {
                index: i,
                message: format!("schema {} (expected {MANIFEST_SCHEMA})", m.schema),
            });
        }
        let these: Vec<&str> = m.results.iter().map(|r| r.arm.as_str()).collect();
        if these != arms || arms.is_empty() {
            return Err(CompareError::SchemaMismatch {
                index: i,
                message: format!("arms {these:?} differ from {arms:?}"),
            });
        }
    }
    Ok(arms
        .iter()
        .enumerate()
        .map(|(a, arm)| {
            let col = |f: fn(&ArmResult) -> f64| mean_std(&manifests.iter().map(|m| f(&m.results[a])).collect::<Vec<_>>());
            AggregateRow {
                arm: arm.to_string(),
                ssim: col(|r| r.ssim),
                rmse: col(|r| r.rmse),
                ssim_improvement_pct: col(|r| r.ssim_improvement_pct),
                rmse_improvement_pct: col(|r| r.rmse_improvement_pct),
            }
        })
        .collect())
}

/// Plain-text table of an aggregate, one row per arm.
pub fn format_table(rows: &[AggregateRow], runs: usize) -> String {
    let mut s = format!("runs: {runs}\n");
    let _ = writeln!(
        s,
        "{:<12} {:>17} {:>17} {:>17} {:>17}",
        "arm", "SSIM", "RMSE", "SSIM gain %", "RMSE reduction %"
    );
    let pm = |(m, sd): (f64, f64), digits: usize| format!("{m:.digits$} ± {sd:.digits$}");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>17} {:>17} {:>17} {:>17}",
            r.arm,
            pm(r.ssim, 3),
            pm(r.rmse, 3),
            pm(r.ssim_improvement_pct, 1),
            pm(r.rmse_improvement_pct, 1)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_layers_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 4\nsquat_deg = 60.0\npreset = \"desk256\"\n").unwrap();
        let cfg = ExperimentConfig::from_sources(Some(&file), &["squat_deg=45".into(), "out=runs/a".into()]).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.squat_deg, 45.0);
        assert_eq!(cfg.preset, Preset::Desk256);
        assert_eq!(cfg.out, PathBuf::from("runs/a"));
        assert_eq!(cfg.amp_root_x_mm, ExperimentConfig::default().amp_root_x_mm);

        assert!(matches!(ExperimentConfig::parse("bogus_key = 1"), Err(ConfigError::Syntax(_))));
        assert!(matches!(ExperimentConfig::parse("squat_deg = \"x\""), Err(ConfigError::Syntax(_))));
        assert!(matches!(ExperimentConfig::parse("squat_deg = 200.0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("motion_csv = \"m.csv\""), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            ExperimentConfig::from_sources(None, &["novalue".into()]),
            Err(ConfigError::BadOverride(_))
        ));
        let round = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig {
            seed: Some(1),
            ..Default::default()
        };
        let b = ExperimentConfig {
            out: PathBuf::from("elsewhere"),
            ..a.clone()
        };
        let c = ExperimentConfig {
            squat_deg: 60.0,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn presets() {
        assert_eq!(Preset::Desk.volume(), (128, 2.0));
        assert_eq!(Preset::Desk.geometry().n_views, 124);
        assert_eq!(Preset::Full.geometry().cols, 620);
        let cfg = ExperimentConfig {
            n_views: Some(130),
            volume_n: Some(64),
            ..Default::default()
        };
        assert_eq!(cfg.geometry().n_views, 130);
        assert_eq!(cfg.volume_spec(Vec3::zeros()).dims, [64; 3]);
    }

    #[test]
    fn mean_std_closed_form() {
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
        assert_eq!(mean_std(&[2.0, 2.0]), (2.0, 0.0));
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let (m, s) = mean_std(&v);
        assert!((m - 4.0).abs() < 1e-12);
        // sum of squared deviations 28 over 6 degrees of freedom
        assert!((s - (28.0f64 / 6.0).sqrt()).abs() < 1e-12);
    }

    fn manifest(values: &[(f64, f64)]) -> RunManifest {
        RunManifest {
            schema: MANIFEST_SCHEMA,
            tool_version: "0".into(),
            components: BTreeMap::new(),
            config_sha256: String::new(),
            seed: 0,
            workers: 1,
            mask_voxels: 1,
            stages_completed: vec![],
            failed_stage: None,
            results: ARMS
                .iter()
                .zip(values)
                .map(|(a, &(s, r))| ArmResult {
                    arm: a.to_string(),
                    ssim: s,
                    rmse: r,
                    ssim_improvement_pct: 0.0,
                    rmse_improvement_pct: 0.0,
                })
                .collect(),
            files: vec![],
        }
    }

    #[test]
    fn compare_aggregates_runs() {
        let one = manifest(&[(0.8, 0.07), (0.95, 0.02), (0.96, 0.02)]);
        let rows = compare(std::slice::from_ref(&one)).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].ssim, (0.95, 0.0));
        let rows = compare(&[one.clone(), one.clone()]).unwrap();
        assert_eq!(rows[0].rmse.1, 0.0);
        let runs: Vec<RunManifest> = (1..=7).map(|i| manifest(&[(i as f64, 0.0), (0.0, 0.0), (0.0, 0.0)])).collect();
        let rows = compare(&runs).unwrap();
        assert!((rows[0].ssim.0 - 4.0).abs() < 1e-12);
        assert!((rows[0].ssim.1 - (28.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert!(format_table(&rows, 7).contains("uncorrected"));

        assert_eq!(compare(&[]), Err(CompareError::Empty));
        let mut other = one.clone();
        other.results.pop();
        assert!(matches!(compare(&[one.clone(), other]), Err(CompareError::SchemaMismatch { index: 1, .. })));
        let mut old = one;
        old.schema = 0;
        assert!(matches!(compare(&[old]), Err(CompareError::SchemaMismatch { index: 0, .. })));
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out: dir.path().to_path_buf(),
            ..Default::default()
        };
        let err = run(&cfg, RunMode::TracksOnly).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn short_motion_file_fails_its_stage_with_partial_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let coords = GeneralizedCoords::new(0.0, 120.0, vec![CoordSample::squat(Vec3::new(0.0, 0.85, 0.0), 0.5); 200]).unwrap();
        let csv = dir.path().join("m.csv");
        motion::save_coords_csv(&coords, &csv).unwrap();
        let cfg = ExperimentConfig {
            seed: Some(0),
            motion_csv: Some(csv),
            out: dir.path().join("out"),
            ..Default::default()
        }
        .without_sway();
        let err = run(&cfg, RunMode::TracksOnly).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(err, ExperimentError::Stage { stage: "motion", .. }));
        let m = RunManifest::load(&dir.path().join("out/manifest.json")).unwrap();
        assert_eq!(m.failed_stage.as_deref(), Some("motion"));
        assert!(m.files.iter().any(|f| f.path == "config.toml"));
    }

    #[test]
    fn tracks_only_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |sub: &str| ExperimentConfig {
            seed: Some(9),
            marker_sigma_px: 0.3,
            imu_gyro_sigma: 1e-4,
            out: dir.path().join(sub),
            ..Default::default()
        };
        let a = run(&mk("a"), RunMode::TracksOnly).unwrap();
        let b = run(&mk("b"), RunMode::TracksOnly).unwrap();
        let ja = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
        let jb = std::fs::read(dir.path().join("b/manifest.json")).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(a.proposed, b.proposed);
        let names: Vec<&str> = a.manifest.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(
            names,
            ["config.toml", "coords.csv", "imu.csv", "track_marker.csv", "track_proposed.csv", "track_truth.csv"]
        );
        assert_eq!(a.truth.len(), 124);
        // the IMU track follows the sensor closely
        let worst = a
            .proposed
            .motion
            .iter()
            .zip(&a.truth.motion)
            .map(|(p, t)| (p.translation - t.translation).norm())
            .fold(0.0, f64::max);
        assert!(worst < 5.0, "{worst}");
    }
}
