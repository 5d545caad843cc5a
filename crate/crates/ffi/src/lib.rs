//! C ABI over the experiment runner.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Every fallible call returns a
//! [`KmStatus`]; the message for the last failure on the calling thread is
//! available from [`km_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kneemoco::experiment::{self, ExperimentConfig, ExperimentError, RunMode, RunOutcome};
use kneemoco::moco::MotionTrack;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Stage = 4,
    OutOfRange = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmTrack {
    Truth = 0,
    Proposed = 1,
    Marker = 2,
}

/// Image-quality figures for one reconstruction arm.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KmArmMetrics {
    pub ssim: f64,
    pub rmse: f64,
    pub ssim_improvement_pct: f64,
    pub rmse_improvement_pct: f64,
}

/// Experiment configuration handle.
pub struct KmConfig {
    inner: ExperimentConfig,
}

/// Completed run handle.
pub struct KmRun {
    inner: RunOutcome,
    arm_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn guard(f: impl FnOnce() -> Result<(), KmStatus>) -> KmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KmStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            KmStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, KmStatus> {
    if s.is_null() {
        set_error("null string argument");
        return Err(KmStatus::NullPointer);
    }
    CStr::from_ptr(s).to_str().map_err(|e| {
        set_error(e);
        KmStatus::InvalidUtf8
    })
}

fn config_error(e: impl std::fmt::Display) -> KmStatus {
    set_error(e);
    KmStatus::Config
}

fn null(what: &str) -> KmStatus {
    set_error(format!("null {what}"));
    KmStatus::NullPointer
}

/// Message describing the last failure on this thread; empty if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn km_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn km_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration with default values and no seed.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn km_config_new(out: *mut *mut KmConfig) -> KmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = Box::into_raw(Box::new(KmConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Parses a TOML configuration document.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn km_config_from_toml(toml: *const c_char, out: *mut *mut KmConfig) -> KmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let text = read_str(toml)?;
        let inner = ExperimentConfig::parse(text).map_err(config_error)?;
        *out = Box::into_raw(Box::new(KmConfig { inner }));
        Ok(())
    })
}

/// Sets one key from its TOML value text, e.g. `("squat_deg", "45")`.
/// The configuration is unchanged on failure.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn km_config_set(cfg: *mut KmConfig, key: *const c_char, value: *const c_char) -> KmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        let (k, v) = (read_str(key)?, read_str(value)?);
        cfg.inner = cfg.inner.with_overrides(&[format!("{k}={v}")]).map_err(config_error)?;
        Ok(())
    })
}

/// Sets the random seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn km_config_set_seed(cfg: *mut KmConfig, seed: u64) -> KmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        cfg.inner.seed = Some(seed);
        Ok(())
    })
}

/// Sets the output directory.
///
/// # Safety
/// `cfg` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn km_config_set_output(cfg: *mut KmConfig, dir: *const c_char) -> KmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        cfg.inner.out = PathBuf::from(read_str(dir)?);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn km_config_free(cfg: *mut KmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the experiment. With `tracks_only` nonzero, only motion, IMU and
/// the two estimated tracks are produced and the run has no arms.
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn km_run(cfg: *const KmConfig, tracks_only: i32, out: *mut *mut KmRun) -> KmStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let mode = if tracks_only != 0 { RunMode::TracksOnly } else { RunMode::Full };
        let inner = experiment::run(&cfg.inner, mode).map_err(|e| {
            set_error(&e);
            match e {
                ExperimentError::Config(_) => KmStatus::Config,
                ExperimentError::Stage { .. } => KmStatus::Stage,
            }
        })?;
        let arm_names = inner
            .reports
            .iter()
            .map(|r| CString::new(r.arm.clone()).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(KmRun { inner, arm_names }));
        Ok(())
    })
}

/// Number of arms (uncorrected, proposed, marker); zero for a tracks-only run.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn km_run_arm_count(run: *const KmRun) -> usize {
    run.as_ref().map_or(0, |r| r.arm_names.len())
}

/// Name of arm `index`, owned by the run handle; null if out of range.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn km_run_arm_name(run: *const KmRun, index: usize) -> *const c_char {
    run.as_ref()
        .and_then(|r| r.arm_names.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn km_run_arm_metrics(run: *const KmRun, index: usize, out: *mut KmArmMetrics) -> KmStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let out = out.as_mut().ok_or_else(|| null("output pointer"))?;
        let r = run.inner.reports.get(index).ok_or_else(|| {
            set_error(format!("arm {index} out of range"));
            KmStatus::OutOfRange
        })?;
        *out = KmArmMetrics {
            ssim: r.ssim,
            rmse: r.rmse,
            ssim_improvement_pct: r.ssim_improvement_pct,
            rmse_improvement_pct: r.rmse_improvement_pct,
        };
        Ok(())
    })
}

fn track(run: &KmRun, which: KmTrack) -> &MotionTrack {
    match which {
        KmTrack::Truth => &run.inner.truth,
        KmTrack::Proposed => &run.inner.proposed,
        KmTrack::Marker => &run.inner.marker,
    }
}

/// Number of views in each motion track.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn km_run_track_len(run: *const KmRun) -> usize {
    run.as_ref().map_or(0, |r| r.inner.truth.len())
}

/// Motion matrix of view `index` relative to the first view: the upper
/// 3x4 block, row-major, translation in mm.
///
/// # Safety
/// `run` must be a live handle and `out` point to 12 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn km_run_track_motion(run: *const KmRun, which: KmTrack, index: usize, out: *mut f64) -> KmStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let pose = track(run, which).motion.get(index).ok_or_else(|| {
            set_error(format!("view {index} out of range"));
            KmStatus::OutOfRange
        })?;
        ptr::copy_nonoverlapping(pose.to_row_major_12().as_ptr(), out, 12);
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn km_run_free(run: *mut KmRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
