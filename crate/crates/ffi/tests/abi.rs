//! The C surface exercised through its Rust declarations.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use uwbslam_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let mut n = 0;
    unsafe { uwb_last_error(buf.as_mut_ptr(), buf.len(), &mut n) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned()
}

fn short_config() -> *mut UwbConfig {
    let toml = CString::new(
        "[scenario]\nduration = 60\n[pipeline]\nfinal_rounds = 100\n[pipeline.estimator]\ntau = 15\n",
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { uwb_config_from_toml(toml.as_ptr(), &mut cfg) }, UwbStatus::Ok);
    cfg
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(uwb_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generate_run_and_read_back() {
    let cfg = short_config();
    assert_eq!(unsafe { uwb_config_set_seed(cfg, 4) }, UwbStatus::Ok);
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { uwb_dataset_generate(cfg, &mut data) }, UwbStatus::Ok);
    let (mut robots, mut rangings, mut truth) = (0, 0, false);
    assert_eq!(unsafe { uwb_dataset_info(data, &mut robots, &mut rangings, &mut truth) }, UwbStatus::Ok);
    assert_eq!(robots, 3);
    assert!(rangings > 0 && truth);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("d.txt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { uwb_dataset_save(data, path.as_ptr()) }, UwbStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { uwb_dataset_load(path.as_ptr(), &mut loaded) }, UwbStatus::Ok);

    let mut run = ptr::null_mut();
    assert_eq!(unsafe { uwb_run_pipeline(loaded, cfg, &mut run) }, UwbStatus::Ok);
    let (mut closures, mut inliers, mut rounds, mut bytes) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { uwb_run_summary(run, &mut closures, &mut inliers, &mut rounds, &mut bytes) },
        UwbStatus::Ok
    );
    assert!(closures > 0 && inliers <= closures && rounds > 0 && bytes > 0);

    let mut len = 0;
    assert_eq!(unsafe { uwb_run_trajectory(run, 1, ptr::null_mut(), 0, &mut len) }, UwbStatus::Ok);
    let mut poses = vec![UwbPose::default(); len];
    assert_eq!(
        unsafe { uwb_run_trajectory(run, 1, poses.as_mut_ptr(), 1, &mut len) },
        UwbStatus::BufferTooSmall
    );
    assert_eq!(
        unsafe { uwb_run_trajectory(run, 1, poses.as_mut_ptr(), poses.len(), &mut len) },
        UwbStatus::Ok
    );
    assert!(poses.windows(2).all(|w| w[1].t > w[0].t));
    assert_eq!(unsafe { uwb_run_trajectory(run, 9, ptr::null_mut(), 0, &mut len) }, UwbStatus::OutOfRange);

    let mut stats = UwbErrorStats::default();
    assert_eq!(unsafe { uwb_run_error(run, UwbStage::Anchored, &mut stats) }, UwbStatus::Ok);
    assert_eq!(stats.count as usize, 3 * len);
    assert!(stats.mean_translation.is_finite() && stats.rmse_translation >= stats.mean_translation - 1e-12);

    unsafe {
        uwb_run_free(run);
        uwb_dataset_free(loaded);
        uwb_dataset_free(data);
        uwb_config_free(cfg);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { uwb_config_from_toml(ptr::null(), &mut out) }, UwbStatus::NullPointer);
    assert_eq!(last_error(), "toml is null");

    let cfg = uwb_config_new();
    let bad = CString::new("pipeline.pcm.epsilon=2").unwrap();
    assert_eq!(unsafe { uwb_config_set(cfg, bad.as_ptr()) }, UwbStatus::Config);
    assert!(!last_error().is_empty());
    let good = CString::new("pipeline.pcm.epsilon=0.1").unwrap();
    assert_eq!(unsafe { uwb_config_set(cfg, good.as_ptr()) }, UwbStatus::Ok);
    assert_eq!(last_error(), "");

    let missing = CString::new("/nonexistent/data.txt").unwrap();
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { uwb_dataset_load(missing.as_ptr(), &mut data) }, UwbStatus::Io);
    assert!(data.is_null());

    let mut tiny = [0 as c_char; 4];
    let mut n = 0;
    assert_eq!(unsafe { uwb_last_error(tiny.as_mut_ptr(), tiny.len(), &mut n) }, UwbStatus::BufferTooSmall);
    assert!(n > 3);
    assert_eq!(unsafe { CStr::from_ptr(tiny.as_ptr()) }.to_bytes().len(), 3);

    unsafe {
        uwb_config_free(cfg);
        uwb_config_free(ptr::null_mut());
    }
}

#[test]
fn estimate_from_noiseless_window() {
    // α drives a left arc, β a right arc starting at (2, 3, 0.5) in α's
    // start frame.
    let n = 400;
    let arc = |k: usize, step: f64, curvature: f64| {
        let th = step * curvature * k as f64;
        (th.sin() / curvature, (1.0 - th.cos()) / curvature, th)
    };
    let alpha: Vec<(f64, f64, f64)> = (0..n).map(|k| arc(k, 0.01, 0.4)).collect();
    let start = (2.0f64, 3.0f64, 0.5f64);
    let beta_local: Vec<(f64, f64, f64)> = (0..n).map(|k| arc(k, 0.012, -0.3)).collect();
    let compose = |a: (f64, f64, f64), b: (f64, f64, f64)| {
        let (s, c) = a.2.sin_cos();
        (a.0 + c * b.0 - s * b.1, a.1 + s * b.0 + c * b.1, a.2 + b.2)
    };
    let between = |a: (f64, f64, f64), b: (f64, f64, f64)| {
        let (s, c) = a.2.sin_cos();
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        (c * dx + s * dy, -s * dx + c * dy, b.2 - a.2)
    };
    let beta: Vec<_> = beta_local.iter().map(|&p| compose(start, p)).collect();
    let entries: Vec<UwbWindowEntry> = (0..n)
        .map(|k| {
            let ra = between(alpha[n - 1], alpha[k]);
            let rb = between(beta_local[n - 1], beta_local[k]);
            UwbWindowEntry {
                t: k as f64 * 0.02,
                alpha_x: ra.0,
                alpha_y: ra.1,
                alpha_theta: ra.2,
                beta_x: rb.0,
                beta_y: rb.1,
                beta_theta: rb.2,
                range: ((alpha[k].0 - beta[k].0).powi(2) + (alpha[k].1 - beta[k].1).powi(2)).sqrt(),
            }
        })
        .collect();
    let cfg = uwb_config_new();
    let mut pose = UwbPose::default();
    assert_eq!(
        unsafe { uwb_estimate_relative_pose(cfg, entries.as_ptr(), entries.len(), &mut pose) },
        UwbStatus::Ok,
        "{}",
        last_error()
    );
    let truth = between(alpha[n - 1], beta[n - 1]);
    assert!((pose.x - truth.0).hypot(pose.y - truth.1) < 1e-4, "{pose:?} vs {truth:?}");
    assert!((pose.theta - truth.2).abs() < 1e-4);
    assert_eq!(
        unsafe { uwb_estimate_relative_pose(cfg, entries.as_ptr(), 3, &mut pose) },
        UwbStatus::Estimation
    );
    unsafe { uwb_config_free(cfg) };
}
