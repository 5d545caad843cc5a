use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use kneemoco_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(km_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(km_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_map_to_status_codes() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(km_config_new(&mut cfg), KmStatus::Ok);
        assert_eq!(km_config_set(cfg, cstr("squat_deg").as_ptr(), cstr("45").as_ptr()), KmStatus::Ok);
        assert_eq!(km_config_set(cfg, cstr("squat_deg").as_ptr(), cstr("500").as_ptr()), KmStatus::Config);
        assert!(last_error().contains("squat_deg"));
        assert_eq!(km_config_set(cfg, cstr("no_such_key").as_ptr(), cstr("1").as_ptr()), KmStatus::Config);
        assert_eq!(km_config_set(cfg, ptr::null(), cstr("1").as_ptr()), KmStatus::NullPointer);
        let bad = [0xffu8, 0];
        assert_eq!(km_config_set(cfg, bad.as_ptr().cast(), cstr("1").as_ptr()), KmStatus::InvalidUtf8);

        // no seed
        let mut run = ptr::null_mut();
        assert_eq!(km_run(cfg, 1, &mut run), KmStatus::Config);
        assert!(run.is_null());
        km_config_free(cfg);

        assert_eq!(km_config_from_toml(cstr("seed = [").as_ptr(), &mut cfg), KmStatus::Config);
        assert_eq!(km_config_new(ptr::null_mut()), KmStatus::NullPointer);
        km_config_free(ptr::null_mut());
        km_run_free(ptr::null_mut());
        assert_eq!(km_run_arm_count(ptr::null()), 0);
    }
}

#[test]
fn tracks_only_run_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(km_config_from_toml(cstr("seed = 3\nsquat_deg = 40.0").as_ptr(), &mut cfg), KmStatus::Ok);
        let out = cstr(dir.path().to_str().unwrap());
        assert_eq!(km_config_set_output(cfg, out.as_ptr()), KmStatus::Ok);
        let mut run = ptr::null_mut();
        assert_eq!(km_run(cfg, 1, &mut run), KmStatus::Ok, "{}", last_error());
        km_config_free(cfg);

        assert_eq!(km_run_arm_count(run), 0);
        assert!(km_run_arm_name(run, 0).is_null());
        let mut m = KmArmMetrics::default();
        assert_eq!(km_run_arm_metrics(run, 0, &mut m), KmStatus::OutOfRange);

        let n = km_run_track_len(run);
        assert_eq!(n, 124);
        let mut first = [0.0; 12];
        assert_eq!(km_run_track_motion(run, KmTrack::Truth, 0, first.as_mut_ptr()), KmStatus::Ok);
        let identity = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert!(first.iter().zip(identity).all(|(a, b)| (a - b).abs() < 1e-9), "{first:?}");
        let (mut truth, mut est) = ([0.0; 12], [0.0; 12]);
        km_run_track_motion(run, KmTrack::Truth, n - 1, truth.as_mut_ptr());
        km_run_track_motion(run, KmTrack::Proposed, n - 1, est.as_mut_ptr());
        for i in [3, 7, 11] {
            assert!((truth[i] - est[i]).abs() < 1.0);
        }
        assert_eq!(km_run_track_motion(run, KmTrack::Marker, n, est.as_mut_ptr()), KmStatus::OutOfRange);
        assert_eq!(km_run_track_motion(run, KmTrack::Marker, 0, ptr::null_mut()), KmStatus::NullPointer);
        km_run_free(run);
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn full_run_reports_three_arms() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(km_config_new(&mut cfg), KmStatus::Ok);
        km_config_set_seed(cfg, 1);
        for (k, v) in [("volume_n", "32"), ("voxel_mm", "6.0")] {
            assert_eq!(km_config_set(cfg, cstr(k).as_ptr(), cstr(v).as_ptr()), KmStatus::Ok);
        }
        let out = cstr(dir.path().to_str().unwrap());
        km_config_set_output(cfg, out.as_ptr());
        let mut run = ptr::null_mut();
        assert_eq!(km_run(cfg, 0, &mut run), KmStatus::Ok, "{}", last_error());
        km_config_free(cfg);
        let names: Vec<String> = (0..km_run_arm_count(run))
            .map(|i| CStr::from_ptr(km_run_arm_name(run, i)).to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["uncorrected", "proposed", "marker"]);
        let mut m = KmArmMetrics::default();
        assert_eq!(km_run_arm_metrics(run, 1, &mut m), KmStatus::Ok);
        assert!(m.ssim > 0.0 && m.ssim <= 1.0 && m.rmse >= 0.0);
        km_run_free(run);
    }
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kneemoco.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["km_config_new", "km_run", "km_run_track_motion", "km_last_error", "typedef struct KmRun KmRun"] {
        assert!(text.contains(sym), "{sym}");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-std=c99", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
