//! C interface to the `splatpose` library.
//!
//! Every function returns an [`SpStatus`]. On failure a message is kept per
//! thread and can be read with [`sp_last_error_message`]. Objects cross the
//! boundary as opaque handles created by `*_new`/`*_load` functions and
//! released by the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::Vector3;
use splatpose::geometry::{CameraPose, Intrinsics, Quaternion};
use splatpose::image::Image;
use splatpose::io::SequenceDataset;
use splatpose::metrics::{ate, psnr, rpe, Trajectory};
use splatpose::pipeline::{build_report, run_sequence, PipelineConfig};
use splatpose::splat::{read_gaussians, render, Gaussian, GaussianSet};
use splatpose::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Numerical = 6,
    Panic = 7,
}

/// Pinhole intrinsics in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Relative pose error.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpRpe {
    /// Mean per-step translation error, times 100.
    pub translation: f64,
    pub rotation_deg: f64,
}

pub struct SpGaussians(GaussianSet);
pub struct SpTrajectory(Trajectory);
pub struct SpDataset(SequenceDataset);
pub struct SpConfig(PipelineConfig);
pub struct SpRun {
    trajectory: Trajectory,
    report: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let mut bytes = msg.into();
    bytes.retain(|b| *b != 0);
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(bytes).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> SpStatus {
    match e {
        Error::Io { .. } => SpStatus::Io,
        Error::Format { .. } => SpStatus::Format,
        Error::Config(_) => SpStatus::Config,
        e if e.is_numerical() => SpStatus::Numerical,
        _ => SpStatus::InvalidInput,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SpStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            SpStatus::NullArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SpStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidInput(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn pose_from(p: &[f64; 7]) -> Result<CameraPose, Error> {
    CameraPose::new(Quaternion::from_array([p[0], p[1], p[2], p[3]]), Vector3::new(p[4], p[5], p[6]))
}

fn intrinsics_from(k: &SpIntrinsics) -> Result<Intrinsics, Error> {
    Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

fn image_from(data: &[f64], width: usize, height: usize, channels: usize) -> Result<Image, Error> {
    Image::from_vec(width, height, channels, data.to_vec())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a set from `count` rows of 14 doubles:
/// centre xyz, standard deviations xyz, rotation quaternion wxyz, opacity
/// logit, colour rgb.
///
/// # Safety
/// `params` must point to `14 * count` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_gaussians_new(params: *const f64, count: usize, out_set: *mut *mut SpGaussians) -> SpStatus {
    guard(|| {
        let o = out(out_set, "out_set")?;
        let n = count.checked_mul(14).ok_or_else(|| Error::InvalidInput("gaussian count overflows".into()))?;
        let p = slice(params, n, "params")?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("gaussian parameters must be finite".into()).into());
        }
        let mut gaussians = Vec::with_capacity(count);
        for (i, c) in p.chunks_exact(14).enumerate() {
            let g = Gaussian::from_array(c.try_into().expect("row of 14"));
            if g.scale.iter().any(|s| *s <= 0.0) || g.rotation.norm() == 0.0 {
                return Err(Error::InvalidInput(format!("gaussian {i} needs positive scales and a nonzero rotation")).into());
            }
            gaussians.push(g);
        }
        let set = GaussianSet::new(gaussians);
        *o = Box::into_raw(Box::new(SpGaussians(set)));
        Ok(())
    })
}

/// Reads a set written by the command-line tool.
///
/// # Safety
/// `file` must be a NUL-terminated path; `out_set` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_gaussians_load(file: *const c_char, out_set: *mut *mut SpGaussians) -> SpStatus {
    guard(|| {
        let o = out(out_set, "out_set")?;
        let p = path(file, "file")?;
        let f = std::fs::File::open(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
        let set = read_gaussians(&mut std::io::BufReader::new(f))?;
        *o = Box::into_raw(Box::new(SpGaussians(set)));
        Ok(())
    })
}

/// # Safety
/// `set` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_gaussians_count(set: *const SpGaussians, out_count: *mut usize) -> SpStatus {
    guard(|| {
        *out(out_count, "out_count")? = deref(set, "set")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `set` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sp_gaussians_free(set: *mut SpGaussians) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Renders `set` from the camera-to-world `pose`, seven doubles
/// `qw qx qy qz tx ty tz`.
/// `color` receives `width * height * 3` interleaved values, `depth` and
/// `alpha` `width * height` each; either of the last two may be null.
///
/// # Safety
/// Pointers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn sp_render(
    set: *const SpGaussians,
    pose: *const f64,
    intrinsics: *const SpIntrinsics,
    color: *mut f64,
    depth: *mut f64,
    alpha: *mut f64,
) -> SpStatus {
    guard(|| {
        let set = deref(set, "set")?;
        let pose = pose_from(slice(pose, 7, "pose")?.try_into().expect("seven values"))?;
        let k = intrinsics_from(deref(intrinsics, "intrinsics")?)?;
        if color.is_null() {
            return Err(Failure::Null("color"));
        }
        let r = render(&set.0, &pose, &k);
        let n = k.width * k.height;
        std::slice::from_raw_parts_mut(color, 3 * n).copy_from_slice(r.color.data());
        if !depth.is_null() {
            std::slice::from_raw_parts_mut(depth, n).copy_from_slice(r.depth.data());
        }
        if !alpha.is_null() {
            std::slice::from_raw_parts_mut(alpha, n).copy_from_slice(r.alpha.data());
        }
        Ok(())
    })
}

/// PSNR in dB of two interleaved images with values in `[0, 1]`.
///
/// # Safety
/// `a` and `b` must hold `width * height * channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn sp_psnr(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    out_db: *mut f64,
) -> SpStatus {
    guard(|| {
        let o = out(out_db, "out_db")?;
        let n = width * height * channels;
        let (x, y) = (image_from(slice(a, n, "a")?, width, height, channels)?, image_from(slice(b, n, "b")?, width, height, channels)?);
        *o = psnr(&x, &y)?;
        Ok(())
    })
}

/// Mean SSIM of two interleaved images.
///
/// # Safety
/// As for [`sp_psnr`].
#[no_mangle]
pub unsafe extern "C" fn sp_ssim(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    out_ssim: *mut f64,
) -> SpStatus {
    guard(|| {
        let o = out(out_ssim, "out_ssim")?;
        let n = width * height * channels;
        let (x, y) = (image_from(slice(a, n, "a")?, width, height, channels)?, image_from(slice(b, n, "b")?, width, height, channels)?);
        *o = splatpose::losses::ssim(&x, &y)?;
        Ok(())
    })
}

/// Trajectory of `count` camera-to-world poses, seven doubles each, indexed
/// `0..count`.
///
/// # Safety
/// `poses` must hold `7 * count` doubles; `out_traj` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_trajectory_new(poses: *const f64, count: usize, out_traj: *mut *mut SpTrajectory) -> SpStatus {
    guard(|| {
        let o = out(out_traj, "out_traj")?;
        let n = count.checked_mul(7).ok_or_else(|| Error::InvalidInput("pose count overflows".into()))?;
        let p = slice(poses, n, "poses")?;
        let poses = p.chunks_exact(7).map(|c| pose_from(c.try_into().expect("row of 7"))).collect::<Result<Vec<_>, _>>()?;
        *o = Box::into_raw(Box::new(SpTrajectory(Trajectory::from_poses(poses))));
        Ok(())
    })
}

/// Reads a trajectory text file.
///
/// # Safety
/// `file` must be a NUL-terminated path; `out_traj` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_trajectory_load(file: *const c_char, out_traj: *mut *mut SpTrajectory) -> SpStatus {
    guard(|| {
        let o = out(out_traj, "out_traj")?;
        let t = Trajectory::load(&path(file, "file")?)?;
        *o = Box::into_raw(Box::new(SpTrajectory(t)));
        Ok(())
    })
}

/// # Safety
/// `traj` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_trajectory_len(traj: *const SpTrajectory, out_len: *mut usize) -> SpStatus {
    guard(|| {
        *out(out_len, "out_len")? = deref(traj, "traj")?.0.len();
        Ok(())
    })
}

/// Frame index and pose (seven doubles) of entry `i`.
///
/// # Safety
/// `traj` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_trajectory_get(
    traj: *const SpTrajectory,
    i: usize,
    out_index: *mut usize,
    out_pose: *mut f64,
) -> SpStatus {
    guard(|| {
        let t = &deref(traj, "traj")?.0;
        let (index, pose) = t
            .entries()
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("entry {i} out of range for {} poses", t.len())))?;
        *out(out_index, "out_index")? = *index;
        if out_pose.is_null() {
            return Err(Failure::Null("out_pose"));
        }
        std::slice::from_raw_parts_mut(out_pose, 7).copy_from_slice(&pose.to_params());
        Ok(())
    })
}

/// # Safety
/// `traj` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sp_trajectory_free(traj: *mut SpTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Absolute trajectory error after similarity alignment.
///
/// # Safety
/// Both handles must be live; `out_ate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_ate(est: *const SpTrajectory, gt: *const SpTrajectory, out_ate: *mut f64) -> SpStatus {
    guard(|| {
        let o = out(out_ate, "out_ate")?;
        *o = ate(&deref(est, "est")?.0, &deref(gt, "gt")?.0)?;
        Ok(())
    })
}

/// Relative pose error over adjacent pairs, without alignment.
///
/// # Safety
/// Both handles must be live; `out_rpe` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_rpe(est: *const SpTrajectory, gt: *const SpTrajectory, out_rpe: *mut SpRpe) -> SpStatus {
    guard(|| {
        let o = out(out_rpe, "out_rpe")?;
        let r = rpe(&deref(est, "est")?.0, &deref(gt, "gt")?.0)?;
        *o = SpRpe { translation: r.translation, rotation_deg: r.rotation_deg };
        Ok(())
    })
}

/// Loads a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out_ds` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_load(dir: *const c_char, out_ds: *mut *mut SpDataset) -> SpStatus {
    guard(|| {
        let o = out(out_ds, "out_ds")?;
        let ds = SequenceDataset::load(&path(dir, "dir")?)?;
        *o = Box::into_raw(Box::new(SpDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sp_dataset_free(ds: *mut SpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Pipeline configuration: defaults, overridden by the flat `key = value`
/// text in `text` unless it is null.
///
/// # Safety
/// `text` must be null or NUL-terminated; `out_cfg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_config_new(text: *const c_char, out_cfg: *mut *mut SpConfig) -> SpStatus {
    guard(|| {
        let o = out(out_cfg, "out_cfg")?;
        let mut cfg = PipelineConfig::default();
        if !text.is_null() {
            let t = CStr::from_ptr(text)
                .to_str()
                .map_err(|_| Error::InvalidInput("config text is not valid UTF-8".into()))?;
            cfg = splatpose::io::config::apply(&cfg, t)?;
        }
        cfg.validate()?;
        *o = Box::into_raw(Box::new(SpConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sp_config_free(cfg: *mut SpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full pipeline over the training frames of `ds`.
///
/// # Safety
/// Handles must be live; `out_run` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_run_sequence(ds: *const SpDataset, cfg: *const SpConfig, out_run: *mut *mut SpRun) -> SpStatus {
    guard(|| {
        let o = out(out_run, "out_run")?;
        let ds = &deref(ds, "ds")?.0;
        let cfg = &deref(cfg, "cfg")?.0;
        let state = run_sequence(ds, cfg)?;
        let report = build_report(&state, ds, Vec::new())?.to_json();
        let report = CString::new(report).map_err(|_| Error::InvalidInput("report contains a NUL byte".into()))?;
        *o = Box::into_raw(Box::new(SpRun { trajectory: state.trajectory, report }));
        Ok(())
    })
}

/// Copy of the estimated trajectory, to be released with [`sp_trajectory_free`].
///
/// # Safety
/// `run` must be live; `out_traj` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_run_trajectory(run: *const SpRun, out_traj: *mut *mut SpTrajectory) -> SpStatus {
    guard(|| {
        let o = out(out_traj, "out_traj")?;
        *o = Box::into_raw(Box::new(SpTrajectory(deref(run, "run")?.trajectory.clone())));
        Ok(())
    })
}

/// JSON report of the run, owned by `run`.
///
/// # Safety
/// `run` must be live; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_run_report_json(run: *const SpRun, out_json: *mut *const c_char) -> SpStatus {
    guard(|| {
        *out(out_json, "out_json")? = deref(run, "run")?.report.as_ptr();
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sp_run_free(run: *mut SpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
