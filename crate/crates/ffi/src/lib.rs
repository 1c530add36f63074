//! C ABI over `onc-core`.
//!
//! Every fallible function returns an [`OncStatus`] and writes its result
//! through an out-pointer. On failure the message is kept per thread and can
//! be read with [`onc_last_error_message`]. Handles are opaque and owned by
//! the caller, who releases them with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use onc_core::clm::{nll_term, Thresholds};
use onc_core::eos::{self, Phase};
use onc_core::{link, metrics, Error, LinkKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OncStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    BufferTooSmall = 4,
    Panic = 5,
}

/// Values accepted wherever a `link` argument is expected.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OncLink {
    Logit = 0,
    Probit = 1,
    Cloglog = 2,
}

/// Opaque problem handle.
pub struct OncEosProblem(eos::EosProblem);

/// Opaque solution handle.
pub struct OncEosSolution(eos::EosSolution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> OncStatus {
    match e {
        Error::NoConvergence { .. } | Error::NoBracket(_) | Error::Degenerate { .. } | Error::Diverged { .. } => {
            OncStatus::Numerical
        }
        _ => OncStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (OncStatus, String)>) -> OncStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OncStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OncStatus::Panic
        }
    }
}

fn lift<T>(r: onc_core::Result<T>) -> Result<T, (OncStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (OncStatus, String) {
    (OncStatus::NullPointer, format!("null pointer: {what}"))
}

fn link_of(link: u32) -> Result<LinkKind, (OncStatus, String)> {
    match link {
        0 => Ok(LinkKind::Logit),
        1 => Ok(LinkKind::Probit),
        2 => Ok(LinkKind::Cloglog),
        other => Err((OncStatus::InvalidArgument, format!("unknown link {other}"))),
    }
}

/// # Safety
/// `p` must be null or valid for writes of one `T`.
unsafe fn write<T>(p: *mut T, v: T, what: &str) -> Result<(), (OncStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// # Safety
/// `p` must be null or valid for reads of `len` elements.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (OncStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Inverse link `g(x)`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_link_cdf(link: u32, x: f64, out: *mut f64) -> OncStatus {
    guard(|| {
        let v = lift(link::g(link_of(link)?, x))?;
        write(out, v, "out")
    })
}

/// Density `g'(x)`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_link_density(link: u32, x: f64, out: *mut f64) -> OncStatus {
    guard(|| {
        let v = lift(link::g_prime(link_of(link)?, x))?;
        write(out, v, "out")
    })
}

/// Per-sample loss `-log(g(b - z) - g(a - z))`; `a` may be `-inf` and `b`
/// may be `+inf`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_nll_term(link: u32, z: f64, a: f64, b: f64, out: *mut f64) -> OncStatus {
    guard(|| {
        let v = lift(nll_term(link_of(link)?, z, a, b))?;
        write(out, v, "out")
    })
}

/// Build a problem from `num_thresholds = Q + 1` cut points and `Q` class
/// proportions summing to one.
///
/// # Safety
/// `thresholds` and `alpha` must be valid for their lengths; `out` for one
/// write.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_problem_new(
    link: u32,
    thresholds: *const f64,
    num_thresholds: usize,
    alpha: *const f64,
    num_classes: usize,
    lambda_w: f64,
    lambda_h: f64,
    out: *mut *mut OncEosProblem,
) -> OncStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        let kind = link_of(link)?;
        let thr = lift(Thresholds::new(
            slice(thresholds, num_thresholds, "thresholds")?.to_vec(),
        ))?;
        let alpha = slice(alpha, num_classes, "alpha")?.to_vec();
        let p = lift(eos::EosProblem::new(kind, thr, alpha, lambda_w, lambda_h))?;
        out.write(Box::into_raw(Box::new(OncEosProblem(p))));
        Ok(())
    })
}

/// # Safety
/// `problem` must be null or a handle from [`onc_eos_problem_new`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_problem_free(problem: *mut OncEosProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Phase boundary constant `C`.
///
/// # Safety
/// `problem` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_phase_constant(problem: *const OncEosProblem, out: *mut f64) -> OncStatus {
    guard(|| {
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        let c = lift(eos::phase_constant(&p.0))?;
        write(out, c, "out")
    })
}

/// # Safety
/// `problem` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_solve(problem: *const OncEosProblem, out: *mut *mut OncEosSolution) -> OncStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        out.write(ptr::null_mut());
        let p = problem.as_ref().ok_or_else(|| null("problem"))?;
        let s = lift(eos::solve(&p.0))?;
        out.write(Box::into_raw(Box::new(OncEosSolution(s))));
        Ok(())
    })
}

/// # Safety
/// `solution` must be null or a handle from [`onc_eos_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_solution_free(solution: *mut OncEosSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `solution` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_solution_num_classes(solution: *const OncEosSolution) -> usize {
    solution.as_ref().map_or(0, |s| s.0.z_star.len())
}

/// # Safety
/// `solution` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_solution_w_star(solution: *const OncEosSolution, out: *mut f64) -> OncStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        write(out, s.0.w_star, "out")
    })
}

/// # Safety
/// `solution` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_solution_objective(solution: *const OncEosSolution, out: *mut f64) -> OncStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        write(out, s.0.objective, "out")
    })
}

/// Writes 1 for the trivial phase and 0 otherwise.
///
/// # Safety
/// `solution` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_solution_is_trivial(solution: *const OncEosSolution, out: *mut i32) -> OncStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        write(out, i32::from(s.0.phase == Phase::Trivial), "out")
    })
}

/// Copies the optimal latents into `buf`, which must hold at least
/// [`onc_eos_solution_num_classes`] values.
///
/// # Safety
/// `solution` must be a live handle; `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn onc_eos_solution_z_star(
    solution: *const OncEosSolution,
    buf: *mut f64,
    len: usize,
) -> OncStatus {
    guard(|| {
        let s = solution.as_ref().ok_or_else(|| null("solution"))?;
        let z = &s.0.z_star;
        if len < z.len() {
            return Err((
                OncStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", z.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(z.as_ptr(), buf, z.len());
        Ok(())
    })
}

/// Ordinal spacing indicator for class-mean latents `z_means` (length `Q`,
/// NaN for absent classes) against `Q + 1` thresholds.
///
/// # Safety
/// Input pointers must be valid for their lengths; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn onc_onc3(
    z_means: *const f64,
    num_classes: usize,
    thresholds: *const f64,
    num_thresholds: usize,
    out: *mut f64,
) -> OncStatus {
    guard(|| {
        let z = slice(z_means, num_classes, "z_means")?;
        let thr = lift(Thresholds::new(
            slice(thresholds, num_thresholds, "thresholds")?.to_vec(),
        ))?;
        let v = lift(metrics::onc3(z, &thr))?;
        write(out, v, "out")
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length plus one,
/// or 0 when there is no error. A null `buf` only queries the length.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn onc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = (bytes.len() - 1).min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            buf.add(n).write(0);
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn onc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
