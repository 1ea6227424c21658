//! C ABI over the uwbslam library.
//!
//! Every object crosses the boundary as an opaque handle returned by a
//! constructor such as `uwb_config_new` or `uwb_dataset_generate` and
//! released by the matching `uwb_*_free`.
//! Functions return a `UwbStatus`; on failure a message is available from
//! `uwb_last_error` on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use uwbslam::config::{resolve, ExperimentConfig};
use uwbslam::estimation::{estimate_relative_pose, RangingWindow, WindowEntry};
use uwbslam::geometry::Pose2;
use uwbslam::metrics::{run_metrics, ErrorStats, MetricsReport};
use uwbslam::scenario::{generate_dataset, read_dataset, write_dataset, Dataset, RobotId};
use uwbslam::sim::{run_pipeline, PipelineOutput};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UwbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Estimation = 5,
    Pipeline = 6,
    NoGroundTruth = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Experiment settings.
pub struct UwbConfig {
    inner: ExperimentConfig,
}

/// Odometry, ranging and optional ground truth of every robot.
pub struct UwbDataset {
    inner: Dataset,
}

/// Output of one pipeline run, with metrics when ground truth was present.
pub struct UwbRun {
    output: PipelineOutput,
    metrics: Option<MetricsReport>,
}

/// A timestamped planar pose.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UwbPose {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// One window sample: each robot's pose relative to its own pose at the
/// window end, and the range between them.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UwbWindowEntry {
    pub t: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub alpha_theta: f64,
    pub beta_x: f64,
    pub beta_y: f64,
    pub beta_theta: f64,
    pub range: f64,
}

/// Pipeline stage selector for `uwb_run_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UwbStage {
    /// Every estimated closure.
    Raw = 0,
    /// Closures kept by PCM.
    Pcm = 1,
    /// Relative poses read off the optimized trajectories.
    Dpgo = 2,
    /// Optimized trajectories in the anchor frame.
    Anchored = 3,
}

/// Mean, RMS and max errors of one stage.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UwbErrorStats {
    pub count: u64,
    pub mean_translation: f64,
    pub rmse_translation: f64,
    pub max_translation: f64,
    pub mean_rotation_deg: f64,
    pub rmse_rotation_deg: f64,
    pub max_rotation_deg: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: UwbStatus, message: impl Into<String>) -> UwbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> UwbStatus) -> UwbStatus {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(UwbStatus::Panic, "internal panic"))
}

unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, UwbStatus> {
    if s.is_null() {
        return Err(fail(UwbStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(UwbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, UwbStatus> {
    p.as_ref().ok_or_else(|| fail(UwbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slot<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, UwbStatus> {
    p.as_mut().ok_or_else(|| fail(UwbStatus::NullPointer, format!("{what} is null")))
}

fn status_of(r: Result<(), UwbStatus>) -> UwbStatus {
    r.err().unwrap_or(UwbStatus::Ok)
}

/// Copy the calling thread's last error message into `buf` as a
/// NUL-terminated string. `written` receives the message length without the
/// terminator; a too-small buffer gets a truncated message and
/// `BufferTooSmall`.
///
/// # Safety
/// `buf` must point to `len` writable bytes; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn uwb_last_error(buf: *mut c_char, len: usize, written: *mut usize) -> UwbStatus {
    let message = LAST_ERROR.with(|e| e.borrow().clone());
    if let Some(w) = written.as_mut() {
        *w = message.len();
    }
    if buf.is_null() || len == 0 {
        return if message.is_empty() {
            UwbStatus::Ok
        } else {
            UwbStatus::BufferTooSmall
        };
    }
    let n = message.len().min(len - 1);
    ptr::copy_nonoverlapping(message.as_ptr(), buf as *mut u8, n);
    *buf.add(n) = 0;
    if n < message.len() {
        UwbStatus::BufferTooSmall
    } else {
        UwbStatus::Ok
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uwb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Default settings.
#[no_mangle]
pub extern "C" fn uwb_config_new() -> *mut UwbConfig {
    Box::into_raw(Box::new(UwbConfig {
        inner: ExperimentConfig::default(),
    }))
}

/// Settings from TOML text layered over the defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uwb_config_from_toml(toml: *const c_char, out: *mut *mut UwbConfig) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let out = out_slot(out, "out")?;
            let text = text(toml, "toml")?;
            let inner = resolve(Some(text), &[]).map_err(|e| fail(UwbStatus::Config, e.to_string()))?;
            *out = Box::into_raw(Box::new(UwbConfig { inner }));
            Ok(())
        })())
    })
}

/// Apply one `section.key=value` override.
///
/// # Safety
/// `config` must be a live handle; `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uwb_config_set(config: *mut UwbConfig, assignment: *const c_char) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let config = out_slot(config, "config")?;
            let assignment = text(assignment, "assignment")?.to_string();
            config.inner = resolve(Some(&config.inner.to_toml()), &[assignment])
                .map_err(|e| fail(UwbStatus::Config, e.to_string()))?;
            Ok(())
        })())
    })
}

/// Use `seed` for the scenario, noise, network and outlier streams.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn uwb_config_set_seed(config: *mut UwbConfig, seed: u64) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let config = out_slot(config, "config")?;
            config.inner = config.inner.with_seed(seed);
            Ok(())
        })())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uwb_config_free(config: *mut UwbConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Synthesize a dataset from the `[scenario]` and `[noise]` settings.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uwb_dataset_generate(config: *const UwbConfig, out: *mut *mut UwbDataset) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let out = out_slot(out, "out")?;
            let cfg = &reference(config, "config")?.inner;
            let inner =
                generate_dataset(&cfg.scenario, &cfg.noise).map_err(|e| fail(UwbStatus::Config, e.to_string()))?;
            *out = Box::into_raw(Box::new(UwbDataset { inner }));
            Ok(())
        })())
    })
}

/// Read a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uwb_dataset_load(path: *const c_char, out: *mut *mut UwbDataset) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let out = out_slot(out, "out")?;
            let path = text(path, "path")?;
            let inner = read_dataset(Path::new(path)).map_err(|e| fail(UwbStatus::Io, e.to_string()))?;
            *out = Box::into_raw(Box::new(UwbDataset { inner }));
            Ok(())
        })())
    })
}

/// Write a dataset file.
///
/// # Safety
/// `dataset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uwb_dataset_save(dataset: *const UwbDataset, path: *const c_char) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let data = &reference(dataset, "dataset")?.inner;
            let path = text(path, "path")?;
            write_dataset(Path::new(path), data).map_err(|e| fail(UwbStatus::Io, e.to_string()))
        })())
    })
}

/// Number of robots and ranging measurements.
///
/// # Safety
/// `dataset` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn uwb_dataset_info(
    dataset: *const UwbDataset,
    robots: *mut usize,
    rangings: *mut usize,
    has_truth: *mut bool,
) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let data = &reference(dataset, "dataset")?.inner;
            if let Some(r) = robots.as_mut() {
                *r = data.robots().len();
            }
            if let Some(r) = rangings.as_mut() {
                *r = data.ranging.len();
            }
            if let Some(h) = has_truth.as_mut() {
                *h = data.truth.is_some();
            }
            Ok(())
        })())
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uwb_dataset_free(dataset: *mut UwbDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Run the distributed pipeline over a dataset.
///
/// # Safety
/// `dataset` and `config` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uwb_run_pipeline(
    dataset: *const UwbDataset,
    config: *const UwbConfig,
    out: *mut *mut UwbRun,
) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let out = out_slot(out, "out")?;
            let data = &reference(dataset, "dataset")?.inner;
            let cfg = &reference(config, "config")?.inner;
            cfg.validate().map_err(|e| fail(UwbStatus::Config, e.to_string()))?;
            let output =
                run_pipeline(data, &cfg.pipeline, &cfg.network).map_err(|e| fail(UwbStatus::Pipeline, e.to_string()))?;
            let metrics = match &data.truth {
                Some(truth) => {
                    Some(run_metrics(&output, truth).map_err(|e| fail(UwbStatus::Pipeline, e.to_string()))?)
                }
                None => None,
            };
            *out = Box::into_raw(Box::new(UwbRun { output, metrics }));
            Ok(())
        })())
    })
}

/// Closure counts, DPGO rounds and bytes sent.
///
/// # Safety
/// `run` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn uwb_run_summary(
    run: *const UwbRun,
    closures: *mut usize,
    inliers: *mut usize,
    rounds: *mut usize,
    bytes: *mut u64,
) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let out = &reference(run, "run")?.output;
            for (slot, v) in [(closures, out.closures.len()), (inliers, out.inliers.len()), (rounds, out.rounds)] {
                if let Some(s) = slot.as_mut() {
                    *s = v;
                }
            }
            if let Some(b) = bytes.as_mut() {
                *b = out.comm.total_bytes();
            }
            Ok(())
        })())
    })
}

/// Copy robot `robot`'s optimized trajectory into `poses`. `len` receives the
/// trajectory length; pass a null `poses` to query it.
///
/// # Safety
/// `run` must be a live handle; `poses` must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn uwb_run_trajectory(
    run: *const UwbRun,
    robot: u32,
    poses: *mut UwbPose,
    capacity: usize,
    len: *mut usize,
) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let out = &reference(run, "run")?.output;
            let len = out_slot(len, "len")?;
            let traj = out
                .trajectories
                .get(&RobotId(robot))
                .ok_or_else(|| fail(UwbStatus::OutOfRange, format!("no robot {robot}")))?;
            *len = traj.len();
            if poses.is_null() {
                return Ok(());
            }
            if capacity < traj.len() {
                return Err(fail(UwbStatus::BufferTooSmall, format!("need {} poses", traj.len())));
            }
            let dst = std::slice::from_raw_parts_mut(poses, traj.len());
            for (d, (t, p)) in dst.iter_mut().zip(traj.iter()) {
                *d = UwbPose {
                    t,
                    x: p.x,
                    y: p.y,
                    theta: p.theta,
                };
            }
            Ok(())
        })())
    })
}

fn stats(s: &ErrorStats) -> UwbErrorStats {
    UwbErrorStats {
        count: s.count as u64,
        mean_translation: s.mean_translation,
        rmse_translation: s.mse_translation.sqrt(),
        max_translation: s.max_translation,
        mean_rotation_deg: s.mean_rotation_deg,
        rmse_rotation_deg: s.mse_rotation_deg.sqrt(),
        max_rotation_deg: s.max_rotation_deg,
    }
}

/// Error statistics of one stage against ground truth.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uwb_run_error(run: *const UwbRun, stage: UwbStage, out: *mut UwbErrorStats) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let run = reference(run, "run")?;
            let out = out_slot(out, "out")?;
            let m = run
                .metrics
                .as_ref()
                .ok_or_else(|| fail(UwbStatus::NoGroundTruth, "dataset has no ground truth"))?;
            *out = stats(match stage {
                UwbStage::Raw => &m.raw,
                UwbStage::Pcm => &m.pcm,
                UwbStage::Dpgo => &m.dpgo,
                UwbStage::Anchored => &m.anchored,
            });
            Ok(())
        })())
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uwb_run_free(run: *mut UwbRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Estimate the pose of β in α's frame at the window end from `count`
/// samples in time order, using the `[pipeline.estimator]` settings.
///
/// # Safety
/// `config` must be a live handle; `entries` must hold `count` elements;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uwb_estimate_relative_pose(
    config: *const UwbConfig,
    entries: *const UwbWindowEntry,
    count: usize,
    out: *mut UwbPose,
) -> UwbStatus {
    guard(|| {
        status_of((|| {
            let cfg = &reference(config, "config")?.inner.pipeline.estimator;
            let out = out_slot(out, "out")?;
            if entries.is_null() {
                return Err(fail(UwbStatus::NullPointer, "entries is null"));
            }
            let entries: Vec<WindowEntry> = std::slice::from_raw_parts(entries, count)
                .iter()
                .map(|e| WindowEntry {
                    t: e.t,
                    rel_alpha: Pose2::new(e.alpha_x, e.alpha_y, e.alpha_theta),
                    rel_beta: Pose2::new(e.beta_x, e.beta_y, e.beta_theta),
                    range: e.range,
                })
                .collect();
            let window = RangingWindow::new(RobotId(0), RobotId(1), entries)
                .map_err(|e| fail(UwbStatus::InvalidArgument, e.to_string()))?;
            let lc = estimate_relative_pose(&window, cfg).map_err(|e| fail(UwbStatus::Estimation, e.to_string()))?;
            *out = UwbPose {
                t: lc.t,
                x: lc.relative_pose.x,
                y: lc.relative_pose.y,
                theta: lc.relative_pose.theta,
            };
            Ok(())
        })())
    })
}
