//! C ABI over the `rectiflow` library.
//!
//! Every function returns an [`RfStatus`]; on failure a message is available
//! from [`rf_last_error_message`] on the same thread. Objects are opaque
//! handles released with their `_free` function. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rectiflow::coupling::ParticleCoupling;
use rectiflow::distributions::ParticleSet;
use rectiflow::error::Error;
use rectiflow::experiment::{run_experiment, ExperimentConfig, ExperimentReport};
use rectiflow::integrate::{IntegratorConfig, Scheme};
use rectiflow::ot;
use rectiflow::rectify::{baseline_cost, rectify, Baseline, FieldSource, KernelSettings};
use rectiflow::scenario::{build_scenario, ScenarioName, ScenarioSpec};
use rectiflow::velocity::Bandwidth;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    /// Trajectories collapse; the coupling cannot be rectified.
    NonRectifiable = 4,
    /// Singular times, divergence, out-of-support points, bad matrices.
    Numerical = 5,
    Io = 6,
    /// The experiment stopped early; its partial report is still returned.
    Partial = 7,
    Resource = 8,
    Panic = 9,
}

/// Particle coupling handle.
pub struct RfCoupling(ParticleCoupling);

/// Experiment report handle.
pub struct RfReport(ExperimentReport);

/// One step of a report. Missing metrics are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfStep {
    pub step: usize,
    pub c_i: f64,
    pub loss: f64,
    pub transport_cost: f64,
    pub transport_distance: f64,
    pub energy_mu0: f64,
    pub energy_mu1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> RfStatus {
    match e {
        Error::InvalidArgument(_) | Error::Domain(_) | Error::Parse(_) | Error::Json(_) => {
            RfStatus::InvalidArgument
        }
        Error::Config(_) => RfStatus::Config,
        Error::NonRectifiable { .. } => RfStatus::NonRectifiable,
        Error::Io(_) => RfStatus::Io,
        Error::Resource(_) => RfStatus::Resource,
        Error::AtPoint { source, .. } | Error::Integration { source, .. } => match status_of(source) {
            RfStatus::NonRectifiable => RfStatus::NonRectifiable,
            _ => RfStatus::Numerical,
        },
        _ => RfStatus::Numerical,
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

fn guard(f: impl FnOnce() -> Result<RfStatus, Failure>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            RfStatus::NullPointer
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
            set_error(format!("panic: {msg}"));
            RfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::Lib(Error::InvalidArgument(format!("{what} is not UTF-8: {e}"))))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failure on this thread, empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Pair `n` rows of `x0` with `n` rows of `x1`, both row-major `n x d`.
///
/// # Safety
/// `x0` and `x1` must point to `n * d` readable doubles, `out` to a writable
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_new(
    x0: *const f64,
    x1: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut RfCoupling,
) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidArgument("n * d overflows".into()))?;
        let a = ParticleSet::new(n, d, slice(x0, len, "x0")?.to_vec())?;
        let b = ParticleSet::new(n, d, slice(x1, len, "x1")?.to_vec())?;
        *out = Box::into_raw(Box::new(RfCoupling(ParticleCoupling::new(a, b)?)));
        Ok(RfStatus::Ok)
    })
}

/// Load a coupling from a particle file.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_load(path: *const c_char, out: *mut *mut RfCoupling) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let c = ParticleCoupling::load(string(path, "path")?)?;
        *out = Box::into_raw(Box::new(RfCoupling(c)));
        Ok(RfStatus::Ok)
    })
}

/// Save a coupling to a particle file.
///
/// # Safety
/// `c` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_save(c: *const RfCoupling, path: *const c_char) -> RfStatus {
    guard(|| {
        deref(c, "coupling")?.0.save(string(path, "path")?)?;
        Ok(RfStatus::Ok)
    })
}

/// Sample `n` pairs of a built-in scenario with default parameters, or with
/// `params_json` (a JSON object, may be null).
///
/// # Safety
/// `name` must be NUL-terminated, `params_json` null or NUL-terminated, `out`
/// a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn rf_scenario_build(
    name: *const c_char,
    params_json: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut RfCoupling,
) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let name: ScenarioName = string(name, "name")?.parse()?;
        let mut spec = ScenarioSpec::new(name);
        if !params_json.is_null() {
            spec.params = serde_json::from_str(string(params_json, "params_json")?).map_err(Error::from)?;
        }
        spec.validate()?;
        let (c, _) = build_scenario(&spec, n, seed)?;
        *out = Box::into_raw(Box::new(RfCoupling(c)));
        Ok(RfStatus::Ok)
    })
}

/// Release a coupling; null is ignored.
///
/// # Safety
/// `c` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_free(c: *mut RfCoupling) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Number of pairs, 0 for null.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_len(c: *const RfCoupling) -> usize {
    c.as_ref().map_or(0, |c| c.0.len())
}

/// Dimension, 0 for null.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_dim(c: *const RfCoupling) -> usize {
    c.as_ref().map_or(0, |c| c.0.dim())
}

unsafe fn copy_side(c: *const RfCoupling, side: u8, buf: *mut f64, len: usize) -> RfStatus {
    guard(|| {
        let c = &deref(c, "coupling")?.0;
        let data = if side == 0 { c.x0() } else { c.x1() }.as_slice();
        if len < data.len() {
            return Err(Error::InvalidArgument(format!("buffer holds {len} values, {} needed", data.len())).into());
        }
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(RfStatus::Ok)
    })
}

/// Copy the source rows (row-major `len x dim`) into `buf`.
///
/// # Safety
/// `c` must be a live handle, `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_copy_x0(c: *const RfCoupling, buf: *mut f64, len: usize) -> RfStatus {
    copy_side(c, 0, buf, len)
}

/// Copy the target rows into `buf`.
///
/// # Safety
/// As [`rf_coupling_copy_x0`].
#[no_mangle]
pub unsafe extern "C" fn rf_coupling_copy_x1(c: *const RfCoupling, buf: *mut f64, len: usize) -> RfStatus {
    copy_side(c, 1, buf, len)
}

/// Mean squared displacement.
///
/// # Safety
/// `c` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_transport_cost(c: *const RfCoupling, out: *mut f64) -> RfStatus {
    guard(|| {
        *out_ptr(out, "out")? = ot::transport_cost(&deref(c, "coupling")?.0);
        Ok(RfStatus::Ok)
    })
}

/// Optimal cost between the coupling's marginals; `baseline` is one of
/// `discrete_exact`, `gaussian_closed_form`, `quantile_1d`.
///
/// # Safety
/// `c` must be a live handle, `baseline` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_baseline_cost(
    c: *const RfCoupling,
    baseline: *const c_char,
    out: *mut f64,
) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let b: Baseline = string(baseline, "baseline")?.parse()?;
        *out = baseline_cost(&deref(c, "coupling")?.0, b)?;
        Ok(RfStatus::Ok)
    })
}

/// Energy distance between the target rows of two couplings.
///
/// # Safety
/// `a`, `b` must be live handles, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_energy_distance_x1(
    a: *const RfCoupling,
    b: *const RfCoupling,
    out: *mut f64,
) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ot::energy_distance(deref(a, "a")?.0.x1(), deref(b, "b")?.0.x1())?;
        Ok(RfStatus::Ok)
    })
}

/// One rectification step with the kernel estimator (Scott bandwidth times
/// `bandwidth_multiplier`) and `rk4_steps` RK4 steps. `loss` may be null.
///
/// # Safety
/// `c` must be a live handle, `out` a writable handle slot, `loss` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn rf_rectify_kernel(
    c: *const RfCoupling,
    bandwidth_multiplier: f64,
    rk4_steps: usize,
    seed: u64,
    out: *mut *mut RfCoupling,
    loss: *mut f64,
) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let source = FieldSource::Kernel(KernelSettings {
            bandwidth: Bandwidth::Scott {
                multiplier: bandwidth_multiplier,
            },
            ..KernelSettings::default()
        });
        let config = IntegratorConfig {
            seed,
            ..IntegratorConfig::new(Scheme::Rk4, rk4_steps)
        };
        config.validate()?;
        let (next, diag) = rectify(&deref(c, "coupling")?.0, &source, &config)?;
        if let Some(l) = loss.as_mut() {
            *l = diag.loss.value;
        }
        *out = Box::into_raw(Box::new(RfCoupling(next)));
        Ok(RfStatus::Ok)
    })
}

/// Run an experiment from its JSON config. On [`RfStatus::Ok`] and
/// [`RfStatus::Partial`] a report is stored in `out`; the output section of
/// the config is ignored.
///
/// # Safety
/// `config_json` must be NUL-terminated, `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn rf_experiment_run(config_json: *const c_char, out: *mut *mut RfReport) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let config = ExperimentConfig::from_json(string(config_json, "config_json")?)?;
        let run = run_experiment(&config)?;
        *out = Box::into_raw(Box::new(RfReport(run.report)));
        match run.error {
            None => Ok(RfStatus::Ok),
            Some(e) => {
                set_error(e.to_string());
                Ok(RfStatus::Partial)
            }
        }
    })
}

/// Release a report; null is ignored.
///
/// # Safety
/// `r` must be null or a report not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_report_free(r: *mut RfReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of completed steps, 0 for null.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rf_report_len(r: *const RfReport) -> usize {
    r.as_ref().map_or(0, |r| r.0.steps.len())
}

/// Step `i` of the report.
///
/// # Safety
/// `r` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_report_step(r: *const RfReport, i: usize, out: *mut RfStep) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let r = &deref(r, "report")?.0;
        let s = r
            .steps
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("step {i} out of range ({} steps)", r.steps.len())))?;
        *out = RfStep {
            step: s.step,
            c_i: s.c_i,
            loss: s.loss,
            transport_cost: s.transport_cost,
            transport_distance: s.transport_distance,
            energy_mu0: s.energy_mu0.unwrap_or(f64::NAN),
            energy_mu1: s.energy_mu1.unwrap_or(f64::NAN),
        };
        Ok(RfStatus::Ok)
    })
}

/// The full report as JSON in a new string, released with [`rf_string_free`].
///
/// # Safety
/// `r` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_report_to_json(r: *const RfReport, out: *mut *mut c_char) -> RfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let text = serde_json::to_string(&deref(r, "report")?.0).map_err(Error::from)?;
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(RfStatus::Ok)
    })
}

/// Release a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
