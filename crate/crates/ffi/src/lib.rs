//! C ABI over the `bnmf` library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! a [`BnmfStatus`]; the message of the most recent failure on the calling
//! thread is available from [`bnmf_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bnmf::conditionals::{HyperParams, ModelKind};
use bnmf::error::{Error, ErrorKind};
use bnmf::evaluate::{holdout_split, SplitSpec};
use bnmf::gibbs::{GibbsSampler, RunSchedule, Trace};
use bnmf::matrix::{masked_mse, ObservedMatrix};
use ndarray::Array2;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnmfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid parameter or configuration.
    Config = 2,
    /// Invalid or inconsistent data.
    Data = 3,
    /// Numerical failure inside a sampler.
    Numerical = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnmfModel {
    Gee = 0,
    Gl12 = 1,
    Gl22 = 2,
    GlInf = 3,
    Gl2Inf = 4,
}

impl From<BnmfModel> for ModelKind {
    fn from(m: BnmfModel) -> Self {
        match m {
            BnmfModel::Gee => ModelKind::Gee,
            BnmfModel::Gl12 => ModelKind::Gl12,
            BnmfModel::Gl22 => ModelKind::Gl22,
            BnmfModel::GlInf => ModelKind::GlInf,
            BnmfModel::Gl2Inf => ModelKind::Gl2Inf,
        }
    }
}

impl From<ModelKind> for BnmfModel {
    fn from(m: ModelKind) -> Self {
        match m {
            ModelKind::Gee => BnmfModel::Gee,
            ModelKind::Gl12 => BnmfModel::Gl12,
            ModelKind::Gl22 => BnmfModel::Gl22,
            ModelKind::GlInf => BnmfModel::GlInf,
            ModelKind::Gl2Inf => BnmfModel::Gl2Inf,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnmfHyperParams {
    pub lambda_w: f64,
    pub lambda_z: f64,
    pub alpha_sigma: f64,
    pub beta_sigma: f64,
}

impl From<BnmfHyperParams> for HyperParams {
    fn from(h: BnmfHyperParams) -> Self {
        HyperParams {
            lambda_w: h.lambda_w,
            lambda_z: h.lambda_z,
            alpha_sigma: h.alpha_sigma,
            beta_sigma: h.beta_sigma,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnmfSchedule {
    pub iterations: usize,
    pub burn_in: usize,
    pub snapshot_window: usize,
}

impl From<BnmfSchedule> for RunSchedule {
    fn from(s: BnmfSchedule) -> Self {
        RunSchedule {
            iterations: s.iterations,
            burn_in: s.burn_in,
            snapshot_window: s.snapshot_window,
        }
    }
}

/// Opaque handle to a data matrix with its observation mask.
pub struct BnmfMatrix(ObservedMatrix);

/// Opaque handle to the result of one Gibbs chain.
pub struct BnmfTrace(Trace);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
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

type FfiResult<T> = Result<T, Failure>;

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> BnmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BnmfStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            BnmfStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            match e.kind() {
                ErrorKind::Config => BnmfStatus::Config,
                ErrorKind::Data => BnmfStatus::Data,
                ErrorKind::Numerical => BnmfStatus::Numerical,
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            BnmfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &'static str) -> FfiResult<&'a mut [f64]> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_len(expected: usize, got: usize, what: &str) -> FfiResult<()> {
    if expected != got {
        return Err(Error::InvalidParameter(format!("{what}: buffer holds {got} values, need {expected}")).into());
    }
    Ok(())
}

fn copy_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s;
    }
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bnmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bnmf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn bnmf_hyper_default() -> BnmfHyperParams {
    let h = HyperParams::default();
    BnmfHyperParams {
        lambda_w: h.lambda_w,
        lambda_z: h.lambda_z,
        alpha_sigma: h.alpha_sigma,
        beta_sigma: h.beta_sigma,
    }
}

#[no_mangle]
pub extern "C" fn bnmf_schedule_default() -> BnmfSchedule {
    let s = RunSchedule::default();
    BnmfSchedule {
        iterations: s.iterations,
        burn_in: s.burn_in,
        snapshot_window: s.snapshot_window,
    }
}

/// Parses a model name such as `"gl22"` (case-insensitive).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bnmf_model_from_name(name: *const c_char, out: *mut BnmfModel) -> BnmfStatus {
    guard(|| {
        if name.is_null() {
            return Err(Failure::Null("name"));
        }
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let s = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| Error::Config("model name is not UTF-8".into()))?;
        *out = s.parse::<ModelKind>()?.into();
        Ok(())
    })
}

/// Builds a matrix from `rows * cols` row-major values. `mask` may be null
/// (fully observed); otherwise nonzero bytes mark observed cells.
///
/// # Safety
/// `values` (and `mask` if non-null) must point to `rows * cols` elements;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bnmf_matrix_new(
    rows: usize,
    cols: usize,
    values: *const f64,
    mask: *const u8,
    out: *mut *mut BnmfMatrix,
) -> BnmfStatus {
    guard(|| {
        if values.is_null() {
            return Err(Failure::Null("values"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::InvalidParameter("matrix size overflows".into()))?;
        let v = std::slice::from_raw_parts(values, len).to_vec();
        let values = Array2::from_shape_vec((rows, cols), v)
            .map_err(|e| Error::InvalidParameter(format!("shape: {e}")))?;
        let mask = if mask.is_null() {
            Array2::from_elem((rows, cols), true)
        } else {
            let m = std::slice::from_raw_parts(mask, len);
            Array2::from_shape_fn((rows, cols), |(r, c)| m[r * cols + c] != 0)
        };
        let matrix = ObservedMatrix::new(values, mask)?;
        *out = Box::into_raw(Box::new(BnmfMatrix(matrix)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bnmf_matrix_free(m: *mut BnmfMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bnmf_matrix_rows(m: *const BnmfMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bnmf_matrix_cols(m: *const BnmfMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// # Safety
/// `m` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bnmf_matrix_observed(m: *const BnmfMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.observed_count())
}

/// Mean squared error of a row-major prediction over the observed cells.
///
/// # Safety
/// `prediction` must point to `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bnmf_masked_mse(
    data: *const BnmfMatrix,
    prediction: *const f64,
    len: usize,
    out: *mut f64,
) -> BnmfStatus {
    guard(|| {
        let data = deref(data, "data")?;
        if prediction.is_null() {
            return Err(Failure::Null("prediction"));
        }
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let (r, c) = data.0.dim();
        check_len(r * c, len, "prediction")?;
        let pred = Array2::from_shape_vec((r, c), std::slice::from_raw_parts(prediction, len).to_vec())
            .map_err(|e| Error::InvalidParameter(format!("shape: {e}")))?;
        *out = masked_mse(&data.0, &pred)?;
        Ok(())
    })
}

/// Splits the observed cells into training and test matrices. When the
/// fraction rounds to zero held-out cells, `*test` is set to null.
///
/// # Safety
/// `data` must be a valid handle; `train` and `test` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bnmf_holdout_split(
    data: *const BnmfMatrix,
    unobserved_fraction: f64,
    seed: u64,
    train: *mut *mut BnmfMatrix,
    test: *mut *mut BnmfMatrix,
) -> BnmfStatus {
    guard(|| {
        let data = deref(data, "data")?;
        if train.is_null() || test.is_null() {
            return Err(Failure::Null("train/test"));
        }
        let split = holdout_split(
            &data.0,
            &SplitSpec {
                unobserved_fraction,
                seed,
            },
        )?;
        let test_m = if split.test_count == 0 {
            None
        } else {
            Some(split.test()?)
        };
        *train = Box::into_raw(Box::new(BnmfMatrix(split.train)));
        *test = test_m.map_or(ptr::null_mut(), |t| Box::into_raw(Box::new(BnmfMatrix(t))));
        Ok(())
    })
}

/// Runs one chain. `hyper` and `schedule` may be null for the defaults.
///
/// # Safety
/// `data` must be a valid handle; non-null pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bnmf_run_chain(
    data: *const BnmfMatrix,
    model: BnmfModel,
    k: usize,
    hyper: *const BnmfHyperParams,
    schedule: *const BnmfSchedule,
    seed: u64,
    out: *mut *mut BnmfTrace,
) -> BnmfStatus {
    guard(|| {
        let data = deref(data, "data")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let hyper = hyper.as_ref().map_or_else(HyperParams::default, |h| (*h).into());
        let schedule = schedule.as_ref().map_or_else(RunSchedule::default, |s| (*s).into());
        let trace = GibbsSampler::new(&data.0, model.into(), hyper)?.run(k, &schedule, seed)?;
        *out = Box::into_raw(Box::new(BnmfTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bnmf_trace_free(t: *mut BnmfTrace) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of recorded iterations.
///
/// # Safety
/// `t` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bnmf_trace_len(t: *const BnmfTrace) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Mean of the post-burn-in noise variance draws; NaN for a null handle.
///
/// # Safety
/// `t` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bnmf_trace_posterior_sigma2(t: *const BnmfTrace) -> f64 {
    t.as_ref().map_or(f64::NAN, |t| t.0.posterior_sigma2())
}

/// Copies the per-iteration training MSE into `out[0..len]`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bnmf_trace_train_mse(t: *const BnmfTrace, out: *mut f64, len: usize) -> BnmfStatus {
    guard(|| {
        let t = deref(t, "trace")?;
        check_len(t.0.len(), len, "train_mse")?;
        copy_into(out_slice(out, len, "out")?, t.0.train_mse.iter().copied());
        Ok(())
    })
}

/// Copies the per-iteration noise variance draws into `out[0..len]`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bnmf_trace_sigma2(t: *const BnmfTrace, out: *mut f64, len: usize) -> BnmfStatus {
    guard(|| {
        let t = deref(t, "trace")?;
        check_len(t.0.len(), len, "sigma2")?;
        copy_into(out_slice(out, len, "out")?, t.0.sigma2.iter().copied());
        Ok(())
    })
}

/// Copies the row-major posterior-mean prediction (`rows * cols` values).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bnmf_trace_prediction(t: *const BnmfTrace, out: *mut f64, len: usize) -> BnmfStatus {
    guard(|| {
        let t = deref(t, "trace")?;
        check_len(t.0.posterior_mean.len(), len, "prediction")?;
        copy_into(out_slice(out, len, "out")?, t.0.posterior_mean.iter().copied());
        Ok(())
    })
}

/// Copies the final `W` (`rows * k`) and `Z` (`k * cols`), row-major.
///
/// # Safety
/// `w` and `z` must point to `w_len` and `z_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bnmf_trace_factors(
    t: *const BnmfTrace,
    w: *mut f64,
    w_len: usize,
    z: *mut f64,
    z_len: usize,
) -> BnmfStatus {
    guard(|| {
        let t = deref(t, "trace")?;
        let f = &t.0.final_state.factors;
        check_len(f.w().len(), w_len, "w")?;
        check_len(f.z().len(), z_len, "z")?;
        copy_into(out_slice(w, w_len, "w")?, f.w().iter().copied());
        copy_into(out_slice(z, z_len, "z")?, f.z().iter().copied());
        Ok(())
    })
}
