//! C interface: opaque model and result handles, integer status codes, and
//! a per-thread message for the last failure.
//!
//! Every function returns a status code. Handles returned through out
//! pointers are owned by the caller and released with the matching `_free`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use scdm::composition::check_bridge;
use scdm::dsl::{emit, load_file, lower_str, LowerOptions, Lowered};
use scdm::grid::ValueFunction;
use scdm::scdp::{value_iteration, DpConfig};
use scdm::solver::{root_actions, solve_auto, value_table, SolverConfig};

pub const SCDM_OK: i32 = 0;
/// A required pointer argument was null.
pub const SCDM_ERR_NULL: i32 = 1;
/// A string argument was not valid UTF-8.
pub const SCDM_ERR_UTF8: i32 = 2;
/// The model source or file did not lower.
pub const SCDM_ERR_MODEL: i32 = 3;
/// A solver or analysis step failed.
pub const SCDM_ERR_SOLVE: i32 = 4;
/// The model declares no recurring process.
pub const SCDM_ERR_NO_PROCESS: i32 = 5;
/// Value iteration stopped before reaching the tolerance; the result is still returned.
pub const SCDM_ERR_NOT_CONVERGED: i32 = 6;
/// An index was out of range.
pub const SCDM_ERR_RANGE: i32 = 7;
/// The output buffer was too small; the required size was reported.
pub const SCDM_ERR_BUFFER: i32 = 8;
/// Internal failure.
pub const SCDM_ERR_PANIC: i32 = 9;

/// A lowered model.
pub struct ScdmModel {
    inner: Lowered,
}

/// A value table with its text rendering and work count.
pub struct ScdmSolution {
    value: ValueFunction,
    table: String,
    evaluations: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(code: i32, msg: impl Into<String>) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    code
}

fn guard(f: impl FnOnce() -> i32) -> i32 {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(SCDM_ERR_PANIC, "internal panic"))
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, i32> {
    if p.is_null() {
        return Err(fail(SCDM_ERR_NULL, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SCDM_ERR_UTF8, "string is not UTF-8"))
}

/// Copies `s` plus a terminating NUL into `buf`; `needed` receives the
/// full size including the NUL.
unsafe fn copy_out(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> i32 {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || len < n {
        return fail(SCDM_ERR_BUFFER, format!("buffer needs {n} bytes"));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    SCDM_OK
}

fn diag_text(d: &[scdm::dsl::Diag]) -> String {
    d.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

unsafe fn give<T>(out: *mut *mut T, v: T) -> i32 {
    *out = Box::into_raw(Box::new(v));
    SCDM_OK
}

/// Message describing the last failure on this thread, copied into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn scdm_last_error(buf: *mut c_char, len: usize, needed: *mut usize) -> i32 {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(&msg, buf, len, needed)
}

/// Lowers model source text.
///
/// # Safety
/// `src` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_from_source(
    src: *const c_char,
    out: *mut *mut ScdmModel,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(SCDM_ERR_NULL, "null out pointer");
        }
        let src = match text(src) {
            Ok(s) => s,
            Err(c) => return c,
        };
        match lower_str(src, &LowerOptions::default()) {
            Ok(l) => give(out, ScdmModel { inner: l }),
            Err(d) => fail(SCDM_ERR_MODEL, diag_text(&d)),
        }
    })
}

/// Loads and lowers a model file, resolving imports relative to it.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_from_file(
    path: *const c_char,
    out: *mut *mut ScdmModel,
) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail(SCDM_ERR_NULL, "null out pointer");
        }
        let path = match text(path) {
            Ok(s) => s,
            Err(c) => return c,
        };
        match load_file(Path::new(path), &LowerOptions::default()) {
            Ok(l) => give(out, ScdmModel { inner: l }),
            Err(d) => fail(SCDM_ERR_MODEL, diag_text(&d)),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_free(m: *mut ScdmModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of variables in the model.
///
/// # Safety
/// `m` must be a live model; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_variable_count(m: *const ScdmModel, out: *mut usize) -> i32 {
    if m.is_null() || out.is_null() {
        return fail(SCDM_ERR_NULL, "null argument");
    }
    *out = (*m).inner.model.graph.len();
    SCDM_OK
}

/// Canonical source text of the model.
///
/// # Safety
/// `m` must be a live model; `buf` must point to `len` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn scdm_model_emit(
    m: *const ScdmModel,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> i32 {
    if m.is_null() {
        return fail(SCDM_ERR_NULL, "null model");
    }
    guard(|| copy_out(&emit(&(*m).inner), buf, len, needed))
}

/// Checks a comma-separated bridge; null uses the declared one. Writes 1
/// to `orthomodular` when the decomposition is orthomodular, else 0.
///
/// # Safety
/// `m` must be a live model; `bridge` null or NUL-terminated; `orthomodular` writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_check_bridge(
    m: *const ScdmModel,
    bridge: *const c_char,
    orthomodular: *mut i32,
) -> i32 {
    guard(|| {
        if m.is_null() || orthomodular.is_null() {
            return fail(SCDM_ERR_NULL, "null argument");
        }
        let l = &(*m).inner;
        let set: BTreeSet<String> = if bridge.is_null() {
            match &l.bridge {
                Some(b) => b.clone(),
                None => return fail(SCDM_ERR_SOLVE, "model declares no bridge"),
            }
        } else {
            match text(bridge) {
                Ok(s) => s
                    .split(',')
                    .map(|x| x.trim().to_string())
                    .filter(|x| !x.is_empty())
                    .collect(),
                Err(c) => return c,
            }
        };
        match check_bridge(&l.model, &set) {
            Ok(v) => {
                *orthomodular = i32::from(v.orthomodular);
                SCDM_OK
            }
            Err(e) => fail(SCDM_ERR_SOLVE, e.to_string()),
        }
    })
}

/// Solves the static model over its root grid, through the declared
/// bridge when it is orthomodular unless `force_enumerate` is nonzero.
///
/// # Safety
/// `m` must be a live model; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_solve(
    m: *const ScdmModel,
    force_enumerate: i32,
    out: *mut *mut ScdmSolution,
) -> i32 {
    guard(|| {
        if m.is_null() || out.is_null() {
            return fail(SCDM_ERR_NULL, "null argument");
        }
        let l = &(*m).inner;
        match solve_auto(
            &l.model,
            l.bridge.as_ref(),
            force_enumerate != 0,
            &SolverConfig::default(),
        ) {
            Ok((r, _)) => {
                let actions = root_actions(&l.model, &r.profile, &r.value.grid);
                let table = value_table(&r.value, &actions);
                give(
                    out,
                    ScdmSolution {
                        value: r.value,
                        table,
                        evaluations: r.policy_evaluations,
                    },
                )
            }
            Err(e) => fail(SCDM_ERR_SOLVE, e.to_string()),
        }
    })
}

/// Value iteration on the model's recurring process. When the tolerance
/// is not reached the result is still stored and the status is
/// `SCDM_ERR_NOT_CONVERGED`.
///
/// # Safety
/// `m` must be a live model; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_iterate(
    m: *const ScdmModel,
    tol: f64,
    max_iter: usize,
    out: *mut *mut ScdmSolution,
) -> i32 {
    guard(|| {
        if m.is_null() || out.is_null() {
            return fail(SCDM_ERR_NULL, "null argument");
        }
        let l = &(*m).inner;
        let Some(p) = &l.process else {
            return fail(
                SCDM_ERR_NO_PROCESS,
                "model declares no discount and end state",
            );
        };
        let cfg = DpConfig {
            tol,
            max_iter,
            ..Default::default()
        };
        match value_iteration(p, &cfg) {
            Ok(r) => {
                let table = value_table(&r.value, &[]);
                give(
                    out,
                    ScdmSolution {
                        value: r.value,
                        table,
                        evaluations: r.evaluations,
                    },
                );
                if r.converged {
                    SCDM_OK
                } else {
                    fail(
                        SCDM_ERR_NOT_CONVERGED,
                        format!("not converged after {} iterations", r.trace.iterations),
                    )
                }
            }
            Err(e) => fail(SCDM_ERR_SOLVE, e.to_string()),
        }
    })
}

/// Number of grid points in the value table.
///
/// # Safety
/// `s` must be a live solution; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_solution_len(s: *const ScdmSolution, out: *mut usize) -> i32 {
    if s.is_null() || out.is_null() {
        return fail(SCDM_ERR_NULL, "null argument");
    }
    *out = (*s).value.values.len();
    SCDM_OK
}

/// Value at grid point `index`.
///
/// # Safety
/// `s` must be a live solution; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_solution_value(
    s: *const ScdmSolution,
    index: usize,
    out: *mut f64,
) -> i32 {
    if s.is_null() || out.is_null() {
        return fail(SCDM_ERR_NULL, "null argument");
    }
    let s = &*s;
    match s.value.values.get(index) {
        Some(v) => {
            *out = *v;
            SCDM_OK
        }
        None => fail(SCDM_ERR_RANGE, format!("index {index} out of range")),
    }
}

/// Policy evaluations (static) or joint-action evaluations (dynamic) spent.
///
/// # Safety
/// `s` must be a live solution; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scdm_solution_evaluations(s: *const ScdmSolution, out: *mut u64) -> i32 {
    if s.is_null() || out.is_null() {
        return fail(SCDM_ERR_NULL, "null argument");
    }
    *out = (*s).evaluations;
    SCDM_OK
}

/// The value table as comma-separated text.
///
/// # Safety
/// `s` must be a live solution; `buf` must point to `len` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn scdm_solution_table(
    s: *const ScdmSolution,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> i32 {
    if s.is_null() {
        return fail(SCDM_ERR_NULL, "null solution");
    }
    copy_out(&(*s).table, buf, len, needed)
}

/// Releases a solution. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scdm_solution_free(s: *mut ScdmSolution) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
