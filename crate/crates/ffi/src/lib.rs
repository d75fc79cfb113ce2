//! C ABI over the `u2ad` library.
//!
//! A trained run directory is opened into an opaque [`U2adModel`] handle,
//! which scores raw row-major series. Thresholding and the evaluation
//! metrics work on plain arrays and need no handle.
//!
//! Every fallible call returns a [`U2adStatus`]. On failure a description is
//! kept per thread and can be fetched with [`u2ad_last_error`]; strings
//! returned by this library are released with [`u2ad_string_free`].
//! Panics never cross the boundary; they surface as `U2AD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ndarray::Array2;
use u2ad::data::LabeledSeries;
use u2ad::error::{Error, ErrorClass};
use u2ad::harness::{detect_scores, load_model, ExperimentConfig, RunManifest};
use u2ad::metrics::{EvaluationReport, VusBuffer};
use u2ad::objectives::Center;
use u2ad::scorenet::ScoreNet;
use u2ad::scoring::threshold_by_ratio;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum U2adStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Arguments are inconsistent (lengths, ranges, encoding).
    InvalidArgument = 2,
    /// Bad configuration or an unusable run directory.
    Config = 3,
    /// Input data could not be read or has the wrong shape.
    Data = 4,
    /// Numerical failure while scoring.
    Runtime = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

/// Trained detector. Created by [`u2ad_model_open`], released by
/// [`u2ad_model_free`].
pub struct U2adModel {
    net: ScoreNet,
    center: Center,
    manifest: RunManifest,
    config: ExperimentConfig,
}

/// Detection metrics. Fractions lie in [0, 1]; a field that is undefined
/// for the given labels (no episode, single class) is NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct U2adMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub add: f64,
    pub nrd: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub vus_roc: f64,
    pub vus_pr: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> U2adStatus {
    match e.class() {
        ErrorClass::Config => U2adStatus::Config,
        ErrorClass::Data => U2adStatus::Data,
        ErrorClass::Runtime => U2adStatus::Runtime,
    }
}

struct Fail(U2adStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(U2adStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Fail {
    Fail(U2adStatus::NullPointer, format!("{name} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> U2adStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => U2adStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            U2adStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// Library version as a static NUL-terminated string. Do not free.
#[no_mangle]
pub extern "C" fn u2ad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or null when the last
/// call succeeded. Release with [`u2ad_string_free`].
#[no_mangle]
pub extern "C" fn u2ad_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn u2ad_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens the run directory written by training (manifest and best
/// checkpoint). Scoring uses the run's own configuration.
///
/// # Safety
/// `run_dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn u2ad_model_open(run_dir: *const c_char, out: *mut *mut U2adModel) -> U2adStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if run_dir.is_null() {
            return Err(null("run_dir"));
        }
        let dir = CStr::from_ptr(run_dir).to_str().map_err(|_| invalid("run_dir is not UTF-8"))?;
        let (net, center, manifest) = load_model(Path::new(dir))?;
        let config = manifest.config.clone();
        *out = Box::into_raw(Box::new(U2adModel { net, center, manifest, config }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`u2ad_model_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn u2ad_model_free(model: *mut U2adModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length the model was trained with, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn u2ad_model_window(model: *const U2adModel) -> usize {
    model.as_ref().map_or(0, |m| m.manifest.network.window)
}

/// Channel count the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn u2ad_model_channels(model: *const U2adModel) -> usize {
    model.as_ref().map_or(0, |m| m.manifest.network.d_in)
}

/// Scores a raw series of `len` rows by `channels` columns, row-major,
/// writing one anomaly score per row to `scores`. The series must be at
/// least one window long. Deterministic for a given handle and input.
///
/// # Safety
/// `values` must hold `len * channels` doubles and `scores` room for `len`.
#[no_mangle]
pub unsafe extern "C" fn u2ad_model_score(
    model: *const U2adModel,
    values: *const f64,
    len: usize,
    channels: usize,
    scores: *mut f64,
) -> U2adStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = len.checked_mul(channels).ok_or_else(|| invalid("len * channels overflows"))?;
        let vals = input(values, n, "values")?;
        let out = output(scores, len, "scores")?;
        let arr = Array2::from_shape_vec((len, channels), vals.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let series = LabeledSeries::new(arr, "ffi")?;
        let s = detect_scores(&m.net, &m.center, &m.manifest, &m.config, &series)?;
        out.copy_from_slice(&s.scores);
        Ok(())
    })
}

/// Threshold flagging about `ratio` percent of `pool`, then predictions
/// (`score > threshold`) for `scores`. `predictions` may be null when only
/// the threshold is wanted.
///
/// # Safety
/// Arrays must hold the stated lengths; `threshold` must be writable.
#[no_mangle]
pub unsafe extern "C" fn u2ad_threshold(
    scores: *const f64,
    n_scores: usize,
    pool: *const f64,
    n_pool: usize,
    ratio: f64,
    threshold: *mut f64,
    predictions: *mut u8,
) -> U2adStatus {
    guard(|| {
        if threshold.is_null() {
            return Err(null("threshold"));
        }
        let s = input(scores, n_scores, "scores")?;
        let p = input(pool, n_pool, "pool")?;
        let d = threshold_by_ratio(s, p, ratio)?;
        *threshold = d.threshold;
        if !predictions.is_null() {
            output(predictions, n_scores, "predictions")?.copy_from_slice(&d.predictions);
        }
        Ok(())
    })
}

/// All detection metrics for one labeled series. `vus_max_buffer` is the
/// largest soft-label buffer swept for VUS; a negative value sweeps up to the
/// median episode length.
///
/// # Safety
/// The three arrays must hold `len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn u2ad_metrics(
    labels: *const u8,
    scores: *const f64,
    predictions: *const u8,
    len: usize,
    vus_max_buffer: i64,
    out: *mut U2adMetrics,
) -> U2adStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let l = input(labels, len, "labels")?;
        let s = input(scores, len, "scores")?;
        let p = input(predictions, len, "predictions")?;
        let r = EvaluationReport::compute(l, s, p, VusBuffer::Sweep { max: usize::try_from(vus_max_buffer).ok() })?;
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out = U2adMetrics {
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            add: nan(r.add),
            nrd: nan(r.nrd),
            auc_roc: nan(r.auc_roc),
            auc_pr: nan(r.auc_pr),
            vus_roc: nan(r.vus_roc),
            vus_pr: nan(r.vus_pr),
        };
        Ok(())
    })
}
