//! C ABI over `stiffnode`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_generate`
//! style functions and released with the matching `*_free`. Every fallible
//! function returns a [`StiffnodeStatus`]; on failure the message is available
//! from [`stiffnode_last_error`] on the same thread. Strings returned by the
//! library are owned by the caller and released with [`stiffnode_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stiffnode::bench::{self, ReferenceOptions};
use stiffnode::densela::{DenseMatrix, StateVector};
use stiffnode::matexp;
use stiffnode::odeint::Method;
use stiffnode::pinet::{NetShape, RecoveredModel};
use stiffnode::train::{self, FitOptions, Provenance, TrainConfig, TrainReport, TrajectoryDataset, Weighting};
use stiffnode::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StiffnodeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownName = 3,
    Parse = 4,
    Io = 5,
    /// A solver diverged. For training this still produces a report.
    Diverged = 6,
    Numerical = 7,
    Panic = 8,
}

/// Owned trajectory dataset.
pub struct StiffnodeDataset(TrajectoryDataset);

/// Owned training report.
pub struct StiffnodeReport(TrainReport);

/// Owned polynomial model.
pub struct StiffnodeModel(RecoveredModel);

/// Training options with plain C types. Initialize with
/// [`stiffnode_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct StiffnodeTrainOptions {
    /// Network degree; 0 selects the problem default (1 without a problem).
    pub degree: usize,
    /// Hidden width; 0 selects the monomial count.
    pub width: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub seed: u64,
    pub newton_tol: f64,
    pub freeze_linearization: bool,
    pub segment_weights: bool,
    pub backoff_retries: usize,
    pub refine_iterations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StiffnodeStatus {
    if e.is_divergence() {
        return StiffnodeStatus::Diverged;
    }
    match e.root() {
        Error::Unknown { .. } => StiffnodeStatus::UnknownName,
        Error::Parse(_) => StiffnodeStatus::Parse,
        Error::Io(_) => StiffnodeStatus::Io,
        Error::InvalidConfig(_) | Error::ShapeMismatch(_) => StiffnodeStatus::InvalidArgument,
        _ => StiffnodeStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<StiffnodeStatus, (StiffnodeStatus, String)>>(f: F) -> StiffnodeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside stiffnode".into());
            StiffnodeStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (StiffnodeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (StiffnodeStatus, String) {
    (StiffnodeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (StiffnodeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (StiffnodeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (StiffnodeStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (StiffnodeStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (StiffnodeStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn stiffnode_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn stiffnode_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Matrix exponential of a row-major `d×d` matrix into `out` (`d*d` values).
///
/// # Safety
/// `a` and `out` must point to `d*d` doubles.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_expm(a: *const f64, d: usize, out: *mut f64) -> StiffnodeStatus {
    guard(|| {
        let a = slice_arg(a, d * d, "a")?;
        let out = out_slice(out, d * d, "out")?;
        let m = DenseMatrix::from_row_major(d, d, a.to_vec()).map_err(lib_err)?;
        let e = matexp::expm(&m).map_err(lib_err)?;
        out.copy_from_slice(e.value.as_slice());
        Ok(StiffnodeStatus::Ok)
    })
}

/// Reference data for a registered problem on `n` uniform points.
///
/// # Safety
/// `problem` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_generate(
    problem: *const c_char,
    n: usize,
    out: *mut *mut StiffnodeDataset,
) -> StiffnodeStatus {
    guard(|| {
        let name = str_arg(problem, "problem")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = bench::problem(name).map_err(lib_err)?;
        let data = bench::generate_reference(&p, n, &ReferenceOptions::default()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StiffnodeDataset(data)));
        Ok(StiffnodeStatus::Ok)
    })
}

/// Dataset from `n` times and `n*d` row-major states.
///
/// # Safety
/// `times` must hold `n` doubles, `states` `n*d`; `problem` may be null.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_from_arrays(
    problem: *const c_char,
    times: *const f64,
    states: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut StiffnodeDataset,
) -> StiffnodeStatus {
    guard(|| {
        let name = if problem.is_null() {
            "custom"
        } else {
            str_arg(problem, "problem")?
        };
        let t = slice_arg(times, n, "times")?;
        let y = slice_arg(states, n * d, "states")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if d == 0 {
            return Err((StiffnodeStatus::InvalidArgument, "dimension must be positive".into()));
        }
        let states = y.chunks(d).map(|c| StateVector::new(c.to_vec())).collect();
        let prov = Provenance {
            problem: name.to_string(),
            n,
            generator: "external".into(),
            tolerance: 0.0,
            refinement_depth: 0,
            uniform: false,
        };
        let mut data = TrajectoryDataset::new(t.to_vec(), states, prov).map_err(lib_err)?;
        data.provenance.uniform = data.is_uniform(1e-12);
        *out = Box::into_raw(Box::new(StiffnodeDataset(data)));
        Ok(StiffnodeStatus::Ok)
    })
}

/// Reads a dataset CSV (and its sidecar, when present).
///
/// # Safety
/// `path` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_read(
    path: *const c_char,
    out: *mut *mut StiffnodeDataset,
) -> StiffnodeStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let data = TrajectoryDataset::read(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StiffnodeDataset(data)));
        Ok(StiffnodeStatus::Ok)
    })
}

/// Writes the dataset CSV and sidecar.
///
/// # Safety
/// `ds` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_write(ds: *const StiffnodeDataset, path: *const c_char) -> StiffnodeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let path = str_arg(path, "path")?;
        ds.0.write(Path::new(path)).map_err(lib_err)?;
        Ok(StiffnodeStatus::Ok)
    })
}

/// Number of samples; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_len(ds: *const StiffnodeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// State dimension; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_dim(ds: *const StiffnodeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.dim())
}

/// Copies sample `i` into `t` and `y` (`d` doubles).
///
/// # Safety
/// `ds` must be a live handle, `t` valid, `y` hold `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_sample(
    ds: *const StiffnodeDataset,
    i: usize,
    t: *mut f64,
    y: *mut f64,
    d: usize,
) -> StiffnodeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if i >= ds.0.len() || d != ds.0.dim() {
            return Err((
                StiffnodeStatus::InvalidArgument,
                format!("sample {i} / dimension {d} out of range"),
            ));
        }
        if t.is_null() {
            return Err(null("t"));
        }
        *t = ds.0.times[i];
        out_slice(y, d, "y")?.copy_from_slice(ds.0.states[i].as_slice());
        Ok(StiffnodeStatus::Ok)
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_dataset_free(ds: *mut StiffnodeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Library defaults for training.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_train_options_default(out: *mut StiffnodeTrainOptions) -> StiffnodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let c = TrainConfig::new(Method::IfEuler, NetShape::for_system(1, 1));
        *out = StiffnodeTrainOptions {
            degree: 0,
            width: 0,
            lr: c.lr,
            lr_final: c.lr_final,
            epochs: c.epochs,
            seed: c.seed,
            newton_tol: c.newton_tol,
            freeze_linearization: c.freeze_linearization,
            segment_weights: c.weighting == Weighting::Segment,
            backoff_retries: c.backoff_retries,
            refine_iterations: c.refine_iterations,
        };
        Ok(StiffnodeStatus::Ok)
    })
}

/// Trains a network on `ds` with `method`. When `problem` names a registered
/// problem its truth is used for the error table and its degree as default.
/// A solver divergence still yields a report and returns `Diverged`.
///
/// # Safety
/// Handles and strings must be valid; `problem` may be null.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_train(
    ds: *const StiffnodeDataset,
    method: *const c_char,
    problem: *const c_char,
    options: *const StiffnodeTrainOptions,
    out: *mut *mut StiffnodeReport,
) -> StiffnodeStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let method: Method = str_arg(method, "method")?.parse().map_err(lib_err)?;
        let problem = if problem.is_null() {
            None
        } else {
            Some(bench::problem(str_arg(problem, "problem")?).map_err(lib_err)?)
        };
        let o = *handle(options, "options")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dim = ds.0.dim();
        let degree = match (o.degree, &problem) {
            (0, Some(p)) => p.degree,
            (0, None) => 1,
            (d, _) => d,
        };
        let mut shape = NetShape::for_system(dim, degree);
        if o.width > 0 {
            shape.width = o.width;
        }
        let mut c = TrainConfig::new(method, shape);
        c.lr = o.lr;
        c.lr_final = o.lr_final;
        c.epochs = o.epochs;
        c.seed = o.seed;
        c.newton_tol = o.newton_tol;
        c.freeze_linearization = o.freeze_linearization;
        c.weighting = if o.segment_weights {
            Weighting::Segment
        } else {
            Weighting::Uniform
        };
        c.backoff_retries = o.backoff_retries;
        c.refine_iterations = o.refine_iterations;
        let truth = problem.as_ref().filter(|p| p.dim == dim).map(|p| &p.truth);
        let report = train::fit(
            &ds.0,
            &c,
            FitOptions {
                truth,
                ..FitOptions::default()
            },
        )
        .map_err(lib_err)?;
        let status = if report.converged() {
            StiffnodeStatus::Ok
        } else {
            let msg = report.divergence.as_ref().map_or(String::new(), |d| d.error.clone());
            set_error(msg);
            StiffnodeStatus::Diverged
        };
        *out = Box::into_raw(Box::new(StiffnodeReport(report)));
        Ok(status)
    })
}

/// Whether training finished without divergence.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_report_converged(r: *const StiffnodeReport) -> bool {
    r.as_ref().is_some_and(|r| r.0.converged())
}

/// Best loss reached; NaN when none was recorded or `r` is null.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_report_final_loss(r: *const StiffnodeReport) -> f64 {
    r.as_ref().and_then(|r| r.0.final_loss).unwrap_or(f64::NAN)
}

/// Largest fractional relative coefficient error; NaN without a truth model.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_report_max_relative_error(r: *const StiffnodeReport) -> f64 {
    r.as_ref()
        .and_then(|r| r.0.errors.as_ref())
        .map_or(f64::NAN, |e| e.max_relative())
}

/// Report as JSON; free with [`stiffnode_string_free`]. Null on failure.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_report_json(r: *const StiffnodeReport) -> *mut c_char {
    match r.as_ref() {
        Some(r) => into_c_string(r.0.to_json_string()),
        None => ptr::null_mut(),
    }
}

/// Copies the recovered model out of a report.
///
/// # Safety
/// `r` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_report_model(
    r: *const StiffnodeReport,
    out: *mut *mut StiffnodeModel,
) -> StiffnodeStatus {
    guard(|| {
        let r = handle(r, "report")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(StiffnodeModel(r.0.recovered.clone())));
        Ok(StiffnodeStatus::Ok)
    })
}

/// # Safety
/// `r` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_report_free(r: *mut StiffnodeReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Parses a recovered-model JSON document.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_model_from_json(
    json: *const c_char,
    out: *mut *mut StiffnodeModel,
) -> StiffnodeStatus {
    guard(|| {
        let s = str_arg(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = RecoveredModel::from_json_str(s).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StiffnodeModel(m)));
        Ok(StiffnodeStatus::Ok)
    })
}

/// Ground-truth model of a registered problem.
///
/// # Safety
/// `problem` must be a nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_problem_truth(
    problem: *const c_char,
    out: *mut *mut StiffnodeModel,
) -> StiffnodeStatus {
    guard(|| {
        let name = str_arg(problem, "problem")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = bench::problem(name).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StiffnodeModel(p.truth)));
        Ok(StiffnodeStatus::Ok)
    })
}

/// Number of variables (and equations) of the model; 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_model_dim(m: *const StiffnodeModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.equations.len())
}

/// Coefficient of the monomial with exponents `exps` (`vars` entries) in
/// equation `eq`.
///
/// # Safety
/// `m` must be a live handle, `exps` hold `vars` values, `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_model_coefficient(
    m: *const StiffnodeModel,
    eq: usize,
    exps: *const u32,
    vars: usize,
    out: *mut f64,
) -> StiffnodeStatus {
    guard(|| {
        let m = handle(m, "model")?;
        if eq >= m.0.equations.len() || vars != m.0.vars {
            return Err((
                StiffnodeStatus::InvalidArgument,
                format!("equation {eq} / {vars} variables out of range"),
            ));
        }
        if exps.is_null() || out.is_null() {
            return Err(null("exps/out"));
        }
        let e = std::slice::from_raw_parts(exps, vars);
        *out = m.0.coefficient(eq, e);
        Ok(StiffnodeStatus::Ok)
    })
}

/// Evaluates the model at `x` (`d` values) into `out` (`d` values).
///
/// # Safety
/// `m` must be a live handle; `x` and `out` hold `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_model_evaluate(
    m: *const StiffnodeModel,
    x: *const f64,
    d: usize,
    out: *mut f64,
) -> StiffnodeStatus {
    guard(|| {
        let m = handle(m, "model")?;
        if d != m.0.vars || d != m.0.equations.len() {
            return Err((
                StiffnodeStatus::InvalidArgument,
                format!("model has {} variables, got {d}", m.0.vars),
            ));
        }
        let x = slice_arg(x, d, "x")?;
        out_slice(out, d, "out")?.copy_from_slice(&m.0.evaluate(x));
        Ok(StiffnodeStatus::Ok)
    })
}

/// Model as JSON; free with [`stiffnode_string_free`]. Null for null input.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_model_json(m: *const StiffnodeModel) -> *mut c_char {
    match m.as_ref() {
        Some(m) => into_c_string(m.0.to_json_string()),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stiffnode_model_free(m: *mut StiffnodeModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
