//! C interface to `extbal`.
//!
//! Every fallible function returns an [`ExtbalStatus`]. On failure a
//! message is stored per thread and can be read with
//! [`extbal_last_error_message`] until the next call on that thread.
//! Handles are created by `*_new`/`*_parse`/`*_from_csv` functions and must
//! be released with the matching `*_free` function.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use extbal::estimators::{estimate, estimator_weights, EstimateError, Estimator, EstimatorOptions};
use extbal::io::{self, CsvSchema, IoError, LoadedSource};
use extbal::solver::SolveError;
use extbal::{BasisSpec, SourceSample};
use nalgebra::DMatrix;

pub const EXTBAL_METHOD_IPW: u32 = 0;
pub const EXTBAL_METHOD_IPW_ET: u32 = 1;
pub const EXTBAL_METHOD_EBAL: u32 = 2;
pub const EXTBAL_METHOD_EXTENDED: u32 = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtbalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonConverged = 3,
    RankDeficient = 4,
    SeparationDetected = 5,
    Io = 6,
    Panic = 7,
}

/// Solver settings. Obtain defaults from [`extbal_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ExtbalOptions {
    /// Gradient sup-norm tolerance of the dual solver.
    pub tol: f64,
    pub max_iter: u32,
    /// Rescale each arm's weights to sum to the sample size.
    pub normalize: bool,
}

/// Result of [`extbal_estimate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtbalEstimate {
    pub tau_hat: f64,
    pub ess_treated: f64,
    pub ess_control: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    /// Newton iterations of the balancing solver; 0 for plain IPW.
    pub iterations: u32,
}

/// Opaque source sample.
pub struct ExtbalSample {
    inner: LoadedSource,
}

/// Opaque balancing basis bound to the covariate names of a sample.
pub struct ExtbalBasis {
    spec: BasisSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ExtbalStatus, String);

impl From<EstimateError> for Failure {
    fn from(e: EstimateError) -> Self {
        let status = match &e {
            EstimateError::Solve(SolveError::NonConverged { .. }) | EstimateError::LogisticNonConverged { .. } => {
                ExtbalStatus::NonConverged
            }
            EstimateError::Solve(SolveError::RankDeficient(_)) => ExtbalStatus::RankDeficient,
            EstimateError::Separation { .. } => ExtbalStatus::SeparationDetected,
            _ => ExtbalStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let status = if e.is_io() { ExtbalStatus::Io } else { ExtbalStatus::InvalidArgument };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(ExtbalStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(ExtbalStatus::NullPointer, format!("`{name}` is null"))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `body`, translating failures and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> ExtbalStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => ExtbalStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ExtbalStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn method(code: u32) -> Result<Estimator, Failure> {
    match code {
        EXTBAL_METHOD_IPW => Ok(Estimator::Ipw),
        EXTBAL_METHOD_IPW_ET => Ok(Estimator::IpwEt),
        EXTBAL_METHOD_EBAL => Ok(Estimator::Ebal),
        EXTBAL_METHOD_EXTENDED => Ok(Estimator::Extended),
        other => Err(invalid(format!("unknown method code {other}"))),
    }
}

fn estimator_options(opts: Option<&ExtbalOptions>) -> Result<EstimatorOptions, Failure> {
    let mut out = EstimatorOptions::default();
    if let Some(o) = opts {
        if !(o.tol > 0.0) || o.max_iter == 0 {
            return Err(invalid("tol and max_iter must be positive"));
        }
        out.solver.tol = o.tol;
        out.solver.max_iter = o.max_iter as usize;
        out.solver.normalize = o.normalize;
    }
    Ok(out)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn extbal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next `extbal_*` call on the same thread.
#[no_mangle]
pub extern "C" fn extbal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn extbal_options_default() -> ExtbalOptions {
    let d = EstimatorOptions::default().solver;
    ExtbalOptions { tol: d.tol, max_iter: d.max_iter as u32, normalize: d.normalize }
}

/// Builds a sample from a row-major `n × p` covariate array, `n` treatment
/// flags (0 or 1) and `n` outcomes. Covariates are named `x1..xp`.
///
/// # Safety
/// Each array must hold the stated number of elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn extbal_sample_new(
    n: usize,
    p: usize,
    covariates: *const f64,
    treatment: *const u8,
    outcome: *const f64,
    out: *mut *mut ExtbalSample,
) -> ExtbalStatus {
    guard(|| {
        let cells = n.checked_mul(p).ok_or_else(|| invalid("n * p overflows"))?;
        let x = slice(covariates, cells, "covariates")?;
        let a = slice(treatment, n, "treatment")?;
        let y = slice(outcome, n, "outcome")?;
        let treat = a
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(invalid(format!("treatment[{i}] = {v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sample = SourceSample::new(DMatrix::from_row_slice(n, p, x), treat, y.to_vec()).map_err(|e| invalid(e.to_string()))?;
        put(out, ExtbalSample { inner: LoadedSource { sample, levels: Default::default() } })
    })
}

/// Reads a sample from a CSV file with columns `treatment`, `outcome` and
/// numeric covariates.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn extbal_sample_from_csv(path: *const c_char, out: *mut *mut ExtbalSample) -> ExtbalStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let inner = io::load_source_csv(Path::new(path), &CsvSchema::default())?;
        put(out, ExtbalSample { inner })
    })
}

/// Number of units, or 0 for a null handle.
///
/// # Safety
/// `sample` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn extbal_sample_n(sample: *const ExtbalSample) -> usize {
    sample.as_ref().map_or(0, |s| s.inner.sample.n())
}

/// Number of covariates, or 0 for a null handle.
///
/// # Safety
/// `sample` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn extbal_sample_p(sample: *const ExtbalSample) -> usize {
    sample.as_ref().map_or(0, |s| s.inner.sample.p())
}

/// # Safety
/// `sample` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn extbal_sample_free(sample: *mut ExtbalSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Parses a basis such as `"H: x1, x2^2; G: x3"` against the covariate
/// names of `sample`. The constant term is added first on the H side.
///
/// # Safety
/// `sample` must be a live handle, `text` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn extbal_basis_parse(
    sample: *const ExtbalSample,
    text: *const c_char,
    out: *mut *mut ExtbalBasis,
) -> ExtbalStatus {
    guard(|| {
        let s = sample.as_ref().ok_or_else(|| null("sample"))?;
        let text = c_str(text, "text")?;
        let spec = io::parse_basis(text, s.inner.names(), &s.inner.levels)?;
        put(out, ExtbalBasis { spec })
    })
}

/// Number of H terms including the constant, or 0 for a null handle. This
/// is the length of the target-means array.
///
/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn extbal_basis_h_len(basis: *const ExtbalBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.spec.h_len())
}

/// # Safety
/// `basis` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn extbal_basis_g_len(basis: *const ExtbalBasis) -> usize {
    basis.as_ref().map_or(0, |b| b.spec.g_len())
}

/// # Safety
/// `basis` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn extbal_basis_free(basis: *mut ExtbalBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

struct Inputs<'a> {
    sample: &'a SourceSample,
    spec: &'a BasisSpec,
    target: &'a [f64],
    method: Estimator,
    opts: EstimatorOptions,
}

unsafe fn inputs<'a>(
    sample: *const ExtbalSample,
    basis: *const ExtbalBasis,
    method_code: u32,
    target: *const f64,
    target_len: usize,
    options: *const ExtbalOptions,
) -> Result<Inputs<'a>, Failure> {
    let sample = &sample.as_ref().ok_or_else(|| null("sample"))?.inner.sample;
    let spec = &basis.as_ref().ok_or_else(|| null("basis"))?.spec;
    if target_len != spec.h_len() {
        return Err(invalid(format!("target has {target_len} entries, basis has {} H terms", spec.h_len())));
    }
    let target = slice(target, target_len, "target")?;
    Ok(Inputs { sample, spec, target, method: method(method_code)?, opts: estimator_options(options.as_ref())? })
}

/// Estimates the target-population ATE. `target` holds the target means of
/// the H terms in basis order, constant first. `options` may be null.
///
/// # Safety
/// Handles must be live, `target` must hold `target_len` values, and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn extbal_estimate(
    sample: *const ExtbalSample,
    basis: *const ExtbalBasis,
    method: u32,
    target: *const f64,
    target_len: usize,
    options: *const ExtbalOptions,
    out: *mut ExtbalEstimate,
) -> ExtbalStatus {
    guard(|| {
        let inp = inputs(sample, basis, method, target, target_len, options)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = estimate(inp.method, inp.sample, inp.spec, inp.target, &inp.opts)?;
        *out = ExtbalEstimate {
            tau_hat: r.tau_hat,
            ess_treated: r.weights.ess_treated,
            ess_control: r.weights.ess_control,
            weight_min: r.weights.min,
            weight_max: r.weights.max,
            iterations: r.solver.map_or(0, |s| s.iterations as u32),
        };
        Ok(())
    })
}

/// Writes one weight per unit into `weights`, which must hold exactly
/// `extbal_sample_n(sample)` values.
///
/// # Safety
/// As for [`extbal_estimate`]; `weights` must hold `weights_len` values.
#[no_mangle]
pub unsafe extern "C" fn extbal_weights(
    sample: *const ExtbalSample,
    basis: *const ExtbalBasis,
    method: u32,
    target: *const f64,
    target_len: usize,
    options: *const ExtbalOptions,
    weights: *mut f64,
    weights_len: usize,
) -> ExtbalStatus {
    guard(|| {
        let inp = inputs(sample, basis, method, target, target_len, options)?;
        if weights_len != inp.sample.n() {
            return Err(invalid(format!("weights buffer holds {weights_len} values, sample has {}", inp.sample.n())));
        }
        if weights.is_null() {
            return Err(null("weights"));
        }
        let w = estimator_weights(inp.method, inp.sample, inp.spec, inp.target, &inp.opts)?;
        std::slice::from_raw_parts_mut(weights, weights_len).copy_from_slice(&w.weights.weights);
        Ok(())
    })
}
