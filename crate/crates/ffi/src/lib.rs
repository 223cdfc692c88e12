//! C ABI for the qvi solver library: opaque handles, integer status codes,
//! and a thread-local last-error message. The header `include/qvi.h` is
//! generated at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use qvi_core::config::{parse_config, ParsedConfig};
use qvi_core::fixedpoint::picard_solve_cfg;
use qvi_core::model::{
    check_no_free_loop, sample_cloud, validate_static, DriverSpec,
};
use qvi_core::montecarlo::binomial_oracle;
use qvi_core::operators::ValueField;
use qvi_core::solver::{solve_double_cfg, solve_penalized_cfg};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QviStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    GridMissing = 4,
    SolveFailed = 5,
    IterationFailed = 6,
    ValidationFailed = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Opaque problem handle: a parsed model file plus its grid and options.
pub struct QviProblem {
    parsed: ParsedConfig,
}

/// Opaque solved value function.
pub struct QviField {
    field: ValueField,
}

fn guard<F: FnOnce() -> QviStatus>(f: F) -> QviStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in qvi".to_string());
            set_error(&msg);
            QviStatus::Panic
        }
    }
}

/// Parses a model document (the same format the `qvi` CLI reads) into a
/// problem handle. On success writes the handle to `out`.
///
/// # Safety
/// `config_text` must be a valid NUL-terminated string and `out` a valid
/// pointer. The returned handle must be released with `qvi_problem_free`.
#[no_mangle]
pub unsafe extern "C" fn qvi_problem_parse(
    config_text: *const c_char,
    out: *mut *mut QviProblem,
) -> QviStatus {
    if config_text.is_null() || out.is_null() {
        set_error("null argument");
        return QviStatus::NullArgument;
    }
    let text = match CStr::from_ptr(config_text).to_str() {
        Ok(t) => t,
        Err(_) => {
            set_error("config text is not valid UTF-8");
            return QviStatus::InvalidUtf8;
        }
    };
    guard(|| match parse_config(text) {
        Ok(parsed) => {
            *out = Box::into_raw(Box::new(QviProblem { parsed }));
            QviStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            QviStatus::ConfigError
        }
    })
}

/// Releases a problem handle. A null pointer is ignored.
///
/// # Safety
/// `p` must have been returned by `qvi_problem_parse` and not freed before.
#[no_mangle]
pub unsafe extern "C" fn qvi_problem_free(p: *mut QviProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// State dimension of the model, or -1 on a null handle.
///
/// # Safety
/// `p` must be a live handle from `qvi_problem_parse` or null.
#[no_mangle]
pub unsafe extern "C" fn qvi_problem_dimension(p: *const QviProblem) -> i32 {
    if p.is_null() {
        return -1;
    }
    (*p).parsed.spec.dim as i32
}

/// Runs the static assumption checks and the no-free-loop enumeration with
/// the model's bundled validation options. Writes 1 to `out_pass` when every
/// check passes, 0 otherwise.
///
/// # Safety
/// `p` must be a live handle; `out_pass` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qvi_validate(
    p: *const QviProblem,
    seed: u64,
    out_pass: *mut i32,
) -> QviStatus {
    if p.is_null() || out_pass.is_null() {
        set_error("null argument");
        return QviStatus::NullArgument;
    }
    let problem = &*p;
    guard(|| {
        let v = &problem.parsed.validate;
        let cloud = sample_cloud(&problem.parsed.spec, v.radius, v.samples, seed);
        let mut report = validate_static(&problem.parsed.spec, &cloud);
        match check_no_free_loop(&problem.parsed.spec, v.loop_t, &v.loop_starts, v.loop_depth) {
            Ok(loop_report) => report = report.merge(loop_report),
            Err(e) => {
                set_error(&e.to_string());
                return QviStatus::ValidationFailed;
            }
        }
        *out_pass = if report.passed() { 1 } else { 0 };
        QviStatus::Ok
    })
}

unsafe fn solve_common(
    p: *const QviProblem,
    out: *mut *mut QviField,
    penalized: Option<f64>,
) -> QviStatus {
    if p.is_null() || out.is_null() {
        set_error("null argument");
        return QviStatus::NullArgument;
    }
    let problem = &(*p).parsed;
    let grid = match &problem.grid {
        Some(g) => g.clone(),
        None => {
            set_error("the model file has no [grid] section");
            return QviStatus::GridMissing;
        }
    };
    guard(|| {
        let driver = DriverSpec::local(problem.f_tilde.clone());
        let result = match penalized {
            Some(n) => {
                let cfg = problem.solver.to_config(n, &grid, &problem.spec);
                solve_penalized_cfg(&problem.spec, &grid, &cfg, &driver)
            }
            None => {
                let cfg = problem.solver.to_config(0.0, &grid, &problem.spec);
                solve_double_cfg(&problem.spec, &grid, &cfg, &driver)
            }
        };
        match result {
            Ok(field) => {
                *out = Box::into_raw(Box::new(QviField { field }));
                QviStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                QviStatus::SolveFailed
            }
        }
    })
}

/// Solves the penalized problem at level `n`.
///
/// # Safety
/// `p` must be a live handle; `out` must be valid. The returned field must
/// be released with `qvi_field_free`.
#[no_mangle]
pub unsafe extern "C" fn qvi_solve_penalized(
    p: *const QviProblem,
    n: f64,
    out: *mut *mut QviField,
) -> QviStatus {
    solve_common(p, out, Some(n))
}

/// Solves the double-obstacle problem.
///
/// # Safety
/// As `qvi_solve_penalized`.
#[no_mangle]
pub unsafe extern "C" fn qvi_solve_double(
    p: *const QviProblem,
    out: *mut *mut QviField,
) -> QviStatus {
    solve_common(p, out, None)
}

/// Picard iteration for the driver with intervention weight `k_nl`. Writes
/// the converged field and the iteration count.
///
/// # Safety
/// `p` live handle; `out` and `out_iterations` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn qvi_picard_solve(
    p: *const QviProblem,
    k_nl: f64,
    tol: f64,
    kmax: u32,
    out: *mut *mut QviField,
    out_iterations: *mut u32,
) -> QviStatus {
    if p.is_null() || out.is_null() || out_iterations.is_null() {
        set_error("null argument");
        return QviStatus::NullArgument;
    }
    let problem = &(*p).parsed;
    let grid = match &problem.grid {
        Some(g) => g.clone(),
        None => {
            set_error("the model file has no [grid] section");
            return QviStatus::GridMissing;
        }
    };
    guard(|| {
        let driver = DriverSpec::with_intervention_term(problem.f_tilde.clone(), k_nl);
        let cfg = problem.solver.to_config(0.0, &grid, &problem.spec);
        match picard_solve_cfg(&problem.spec, &grid, &driver, tol, kmax as usize, &cfg) {
            Ok((field, trace)) => {
                *out_iterations = trace.entries.len() as u32;
                *out = Box::into_raw(Box::new(QviField { field }));
                QviStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                QviStatus::IterationFailed
            }
        }
    })
}

/// Releases a field handle. A null pointer is ignored.
///
/// # Safety
/// `f` must have been returned by a solve call and not freed before.
#[no_mangle]
pub unsafe extern "C" fn qvi_field_free(f: *mut QviField) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Interpolated field value at (t, x). `x` points to `x_len` coordinates,
/// which must equal the model dimension.
///
/// # Safety
/// `f` live field handle; `x` valid for `x_len` reads; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn qvi_field_value_at(
    f: *const QviField,
    t: f64,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
) -> QviStatus {
    if f.is_null() || x.is_null() || out.is_null() {
        set_error("null argument");
        return QviStatus::NullArgument;
    }
    let field = &(*f).field;
    if x_len != field.grid.dim {
        set_error("x has the wrong dimension");
        return QviStatus::ConfigError;
    }
    let coords = std::slice::from_raw_parts(x, x_len);
    guard(|| {
        *out = field.value_at(t, coords);
        QviStatus::Ok
    })
}

/// Number of time slices in a field (time_steps + 1), or 0 on null.
///
/// # Safety
/// `f` must be a live field handle or null.
#[no_mangle]
pub unsafe extern "C" fn qvi_field_num_slices(f: *const QviField) -> u64 {
    if f.is_null() {
        return 0;
    }
    (*f).field.slices.len() as u64
}

/// Writes the field CSV (`t,x1[,x2],v`) to `path`.
///
/// # Safety
/// `f` live field handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qvi_field_write_csv(
    f: *const QviField,
    path: *const c_char,
) -> QviStatus {
    if f.is_null() || path.is_null() {
        set_error("null argument");
        return QviStatus::NullArgument;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(p) => p,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return QviStatus::InvalidUtf8;
        }
    };
    guard(|| match std::fs::write(path, (*f).field.to_csv()) {
        Ok(()) => QviStatus::Ok,
        Err(e) => {
            set_error(&e.to_string());
            QviStatus::SolveFailed
        }
    })
}

/// Cox-Ross-Rubinstein American put at spot = strike.
#[no_mangle]
pub extern "C" fn qvi_binomial_oracle(
    rate: f64,
    vol: f64,
    strike: f64,
    horizon: f64,
    steps: u32,
) -> f64 {
    binomial_oracle(rate, vol, strike, horizon, steps.max(1) as usize)
}

/// Copies the last error message into `buf` (truncating to `len - 1` bytes,
/// always NUL-terminated when `len > 0`) and returns the full message length
/// in bytes excluding the terminator.
///
/// # Safety
/// `buf` must be valid for `len` writes, or null (to query the length).
#[no_mangle]
pub unsafe extern "C" fn qvi_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}
