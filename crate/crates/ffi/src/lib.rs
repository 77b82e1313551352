//! C ABI over `wasserquick`.
//!
//! Objects are opaque handles created by `wq_*_new`/`wq_*_solve` style calls
//! and released with the matching `wq_*_free`. Every fallible call returns a
//! [`WqStatus`]; on failure the message is available from
//! [`wq_last_error_message`] on the same thread until the next failing call.
//! Strings returned by the library are freed with [`wq_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wasserquick::detect::{CusumState, GlrState, LikelihoodRatioModel, SmoothedLfd};
use wasserquick::lfd::{solve_lfd, verify_weak_boundedness, LfdProblem, LfdSolution, SolverOptions};
use wasserquick::sim::{compare_methods, curve_csv, ExperimentConfig};
use wasserquick::space::{GroundMetric, Point};
use wasserquick::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WqStatus {
    Ok = 0,
    InvalidInput = 1,
    Infeasible = 2,
    Numerical = 3,
    Usage = 4,
    Calibration = 5,
    NullPointer = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WqMetric {
    L1 = 0,
    L2 = 1,
    Linf = 2,
}

impl From<WqMetric> for GroundMetric {
    fn from(m: WqMetric) -> Self {
        match m {
            WqMetric::L1 => GroundMetric::L1,
            WqMetric::L2 => GroundMetric::L2,
            WqMetric::Linf => GroundMetric::Linf,
        }
    }
}

/// A solved least favorable pair.
pub struct WqLfd(LfdSolution);

enum DetectorState {
    Cusum { model: LikelihoodRatioModel, state: CusumState },
    Glr(GlrState),
}

/// An online detector fed one observation at a time.
pub struct WqDetector(DetectorState);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> WqStatus {
    match err {
        Error::InvalidInput(_) => WqStatus::InvalidInput,
        Error::Infeasible { .. } => WqStatus::Infeasible,
        Error::Numerical { .. } => WqStatus::Numerical,
        Error::Usage(_) => WqStatus::Usage,
        Error::Calibration(_) => WqStatus::Calibration,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WqStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            WqStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic");
            WqStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

/// # Safety
/// `data` must point to `len` readable values unless `len` is 0.
unsafe fn slice<'a>(data: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(data, what)?;
    Ok(std::slice::from_raw_parts(data, len))
}

/// # Safety
/// `s` must be a valid NUL-terminated string.
unsafe fn utf8<'a>(s: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    non_null(s, what)?;
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidInput(format!("{what} is not UTF-8"))))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior NULs removed").into_raw()
}

fn points(data: &[f64], dim: usize) -> Result<Vec<Point>, Error> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::InvalidInput(format!(
            "{} values do not split into points of dimension {dim}",
            data.len()
        )));
    }
    data.chunks(dim).map(|c| Point::new(c.to_vec())).collect()
}

/// Message of the last failing call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn wq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Solves the least favorable pair for two sample sets stored row-major
/// with `dim` coordinates per observation.
///
/// # Safety
/// `pre` and `post` must point to `n_pre·dim` and `n_post·dim` values;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_solve(
    pre: *const f64,
    n_pre: usize,
    post: *const f64,
    n_post: usize,
    dim: usize,
    r1: f64,
    r2: f64,
    metric: WqMetric,
    out: *mut *mut WqLfd,
) -> WqStatus {
    guard(|| {
        non_null(out, "out")?;
        let pre = points(slice(pre, n_pre.saturating_mul(dim), "pre")?, dim)?;
        let post = points(slice(post, n_post.saturating_mul(dim), "post")?, dim)?;
        let problem = LfdProblem::new(pre, post, r1, r2, metric.into())?;
        let solution = solve_lfd(&problem, &SolverOptions::default())?;
        *out = Box::into_raw(Box::new(WqLfd(solution)));
        Ok(())
    })
}

/// Parses an LFD document and checks its invariants.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_from_json(json: *const c_char, out: *mut *mut WqLfd) -> WqStatus {
    guard(|| {
        non_null(out, "out")?;
        let solution = LfdSolution::from_json(utf8(json, "json")?)?;
        *out = Box::into_raw(Box::new(WqLfd(solution)));
        Ok(())
    })
}

/// # Safety
/// `lfd` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_free(lfd: *mut WqLfd) {
    if !lfd.is_null() {
        drop(Box::from_raw(lfd));
    }
}

/// Serializes an LFD; free the result with [`wq_string_free`].
///
/// # Safety
/// `lfd` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_to_json(lfd: *const WqLfd, out: *mut *mut c_char) -> WqStatus {
    guard(|| {
        non_null(lfd, "lfd")?;
        non_null(out, "out")?;
        *out = into_c_string((*lfd).0.to_json());
        Ok(())
    })
}

/// Number of support atoms, 0 for null.
///
/// # Safety
/// `lfd` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_support_size(lfd: *const WqLfd) -> usize {
    lfd.as_ref().map_or(0, |l| l.0.support.len())
}

/// Coordinates per atom, 0 for null.
///
/// # Safety
/// `lfd` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_dim(lfd: *const WqLfd) -> usize {
    lfd.as_ref().map_or(0, |l| l.0.dim())
}

/// `KL(p2 ‖ p1)` at the solution, NaN for null.
///
/// # Safety
/// `lfd` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_objective(lfd: *const WqLfd) -> f64 {
    lfd.as_ref().map_or(f64::NAN, |l| l.0.objective)
}

/// Relative duality gap of the certificate, NaN for null.
///
/// # Safety
/// `lfd` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_gap(lfd: *const WqLfd) -> f64 {
    lfd.as_ref().map_or(f64::NAN, |l| l.0.certificate.relative_gap)
}

/// Copies the support (row-major, `size·dim` values) into `buf`.
///
/// # Safety
/// `lfd` must be a live handle and `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_copy_support(lfd: *const WqLfd, buf: *mut f64, len: usize) -> WqStatus {
    guard(|| {
        non_null(lfd, "lfd")?;
        let flat: Vec<f64> = (*lfd).0.support.iter().flat_map(|p| p.coords().to_vec()).collect();
        copy_out(&flat, buf, len)
    })
}

/// Copies `p1` (`which` = 1) or `p2` (`which` = 2) into `buf`.
///
/// # Safety
/// `lfd` must be a live handle and `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_copy_weights(lfd: *const WqLfd, which: u32, buf: *mut f64, len: usize) -> WqStatus {
    guard(|| {
        non_null(lfd, "lfd")?;
        let weights = match which {
            1 => &(*lfd).0.p1,
            2 => &(*lfd).0.p2,
            other => return Err(Error::InvalidInput(format!("which must be 1 or 2, got {other}")).into()),
        };
        copy_out(weights, buf, len)
    })
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if len != values.len() {
        return Err(Error::InvalidInput(format!("buffer holds {len} values, need {}", values.len())).into());
    }
    if len > 0 {
        non_null(buf, "buf")?;
        ptr::copy_nonoverlapping(values.as_ptr(), buf, len);
    }
    Ok(())
}

/// Worst-case mean likelihood ratio over the pre-change ball and whether it
/// is at most one within tolerance.
///
/// # Safety
/// `lfd` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_lfd_weak_boundedness(
    lfd: *const WqLfd,
    worst_case_mean_lr: *mut f64,
    satisfied: *mut bool,
) -> WqStatus {
    guard(|| {
        non_null(lfd, "lfd")?;
        non_null(worst_case_mean_lr, "worst_case_mean_lr")?;
        non_null(satisfied, "satisfied")?;
        let report = verify_weak_boundedness(&(*lfd).0)?;
        *worst_case_mean_lr = report.worst_case_mean_lr;
        *satisfied = report.satisfied;
        Ok(())
    })
}

fn boxed(state: DetectorState, out: *mut *mut WqDetector) -> Result<(), Failure> {
    non_null(out, "out")?;
    // SAFETY: checked non-null; the caller guarantees it is writable.
    unsafe { *out = Box::into_raw(Box::new(WqDetector(state))) };
    Ok(())
}

/// CUSUM for a unit-variance Gaussian mean shift from 0 to `m`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_detector_cusum_gaussian(m: f64, threshold: f64, out: *mut *mut WqDetector) -> WqStatus {
    guard(|| {
        let model = LikelihoodRatioModel::GaussianExact { m };
        model.validate()?;
        boxed(DetectorState::Cusum { model, state: CusumState::new(threshold) }, out)
    })
}

/// CUSUM on a one-dimensional LFD smoothed with a Gaussian kernel of
/// bandwidth `h`.
///
/// # Safety
/// `lfd` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_detector_cusum_lfd(
    lfd: *const WqLfd,
    h: f64,
    threshold: f64,
    out: *mut *mut WqDetector,
) -> WqStatus {
    guard(|| {
        non_null(lfd, "lfd")?;
        let model = LikelihoodRatioModel::SmoothedLfd(SmoothedLfd::from_solution(&(*lfd).0, h)?);
        boxed(DetectorState::Cusum { model, state: CusumState::new(threshold) }, out)
    })
}

/// Window-limited GLR for a mean shift of standardized observations.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_detector_glr(window: usize, threshold: f64, out: *mut *mut WqDetector) -> WqStatus {
    guard(|| boxed(DetectorState::Glr(GlrState::new(window, threshold)?), out))
}

/// Feeds one observation. Observing after a stop is a usage error.
///
/// # Safety
/// `detector` must be a live handle; `stopped` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_detector_observe(detector: *mut WqDetector, x: f64, stopped: *mut bool) -> WqStatus {
    guard(|| {
        non_null(detector, "detector")?;
        non_null(stopped, "stopped")?;
        *stopped = match &mut (*detector).0 {
            DetectorState::Cusum { model, state } => state.update(model.llr(x))?,
            DetectorState::Glr(state) => state.update(x)?,
        };
        Ok(())
    })
}

/// Current statistic, NaN for null.
///
/// # Safety
/// `detector` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_detector_statistic(detector: *const WqDetector) -> f64 {
    detector.as_ref().map_or(f64::NAN, |d| match &d.0 {
        DetectorState::Cusum { state, .. } => state.statistic,
        DetectorState::Glr(state) => state.statistic(),
    })
}

/// Observations consumed so far, 0 for null.
///
/// # Safety
/// `detector` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wq_detector_time(detector: *const WqDetector) -> u64 {
    detector.as_ref().map_or(0, |d| match &d.0 {
        DetectorState::Cusum { state, .. } => state.time,
        DetectorState::Glr(state) => state.time,
    })
}

/// # Safety
/// `detector` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn wq_detector_free(detector: *mut WqDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Runs a comparison from a JSON experiment configuration and returns the
/// curve CSV; free it with [`wq_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out_csv` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wq_compare(config_json: *const c_char, out_csv: *mut *mut c_char) -> WqStatus {
    guard(|| {
        non_null(out_csv, "out_csv")?;
        let config = ExperimentConfig::from_json(utf8(config_json, "config_json")?)?;
        let comparison = compare_methods(&config)?;
        *out_csv = into_c_string(curve_csv(&comparison.points)?);
        Ok(())
    })
}
