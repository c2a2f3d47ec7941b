//! C ABI over `seli-core`.
//!
//! Every fallible call returns a [`SeliStatus`]; on failure the message is
//! kept per thread and read with [`seli_last_error_message`]. Handles are
//! opaque, created by `*_new`-style calls and released with the matching
//! `*_free`. Matrices are written row-major into caller buffers: pass the
//! capacity in elements, and the required length is always reported through
//! `needed` so a first call with capacity 0 can size the buffer.
//!
//! Pointers must be null or valid for the access described; handles must
//! come from this library and be freed at most once.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use seli_core::convex::{solve_nuc_reg, SolverOptions};
use seli_core::geometry::{minority_collapse_threshold, seli_closed_form};
use seli_core::sel::{build_dataset, build_sel_matrix, min_margin, ImbalanceSpec};
use seli_core::spectral::{closed_form_svd_scaled, DualCertificate, SvdFactors};
use seli_core::SeliError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeliStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidSpec = 2,
    Dimension = 3,
    Unsupported = 4,
    Certificate = 5,
    Degenerate = 6,
    NonFinite = 7,
    Config = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&SeliError> for SeliStatus {
    fn from(e: &SeliError) -> Self {
        match e {
            SeliError::InvalidSpec(_) => SeliStatus::InvalidSpec,
            SeliError::Dimension(_) => SeliStatus::Dimension,
            SeliError::Unsupported(_) => SeliStatus::Unsupported,
            SeliError::Certificate { .. } => SeliStatus::Certificate,
            SeliError::Degenerate(_) => SeliStatus::Degenerate,
            SeliError::NonFinite { .. } => SeliStatus::NonFinite,
            SeliError::Config(_) => SeliStatus::Config,
            SeliError::Io(_) => SeliStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SeliStatus, msg: impl Into<String>) -> SeliStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, recording errors and turning panics into `Panic`.
fn guard<F: FnOnce() -> Result<(), SeliStatus>>(f: F) -> SeliStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SeliStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SeliStatus::Panic, msg)
        }
    }
}

fn lib<T>(r: seli_core::Result<T>) -> Result<T, SeliStatus> {
    r.map_err(|e| fail((&e).into(), e.to_string()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, SeliStatus> {
    p.as_ref().ok_or_else(|| fail(SeliStatus::NullPointer, format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), SeliStatus> {
    if out.is_null() {
        return Err(fail(SeliStatus::NullPointer, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

/// Copies `values` into `buf` after reporting the length through `needed`.
unsafe fn write_buffer(values: &[f64], buf: *mut f64, capacity: usize, needed: *mut usize) -> Result<(), SeliStatus> {
    if !needed.is_null() {
        needed.write(values.len());
    }
    if capacity < values.len() {
        return Err(fail(
            SeliStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    if buf.is_null() {
        return Err(fail(SeliStatus::NullPointer, "output buffer is null"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Copies the thread's last error message, NUL-terminated and truncated to
/// `capacity`, and returns the full length in bytes without the terminator
/// (0 when there is no error).
#[no_mangle]
pub unsafe extern "C" fn seli_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => {
            if !buf.is_null() && capacity > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && capacity > 0 {
                let n = bytes.len().min(capacity - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seli_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// STEP imbalance parameters.
pub struct SeliSpec(ImbalanceSpec);

/// Compact SVD factors of a SEL matrix.
pub struct SeliFactors(SvdFactors);

#[no_mangle]
pub unsafe extern "C" fn seli_spec_new(k: usize, r: f64, rho: f64, n_min: usize, out: *mut *mut SeliSpec) -> SeliStatus {
    guard(|| {
        let spec = lib(ImbalanceSpec::new(k, r, rho, n_min))?;
        write_out(out, Box::into_raw(Box::new(SeliSpec(spec))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn seli_spec_free(spec: *mut SeliSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Number of examples, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn seli_spec_n(spec: *const SeliSpec) -> usize {
    spec.as_ref().map_or(0, |s| s.0.n())
}

/// Writes the k x n SEL matrix.
#[no_mangle]
pub unsafe extern "C" fn seli_sel_matrix(
    spec: *const SeliSpec,
    buf: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> SeliStatus {
    guard(|| {
        let s = deref(spec, "spec")?;
        let ds = lib(build_dataset(&s.0))?;
        write_buffer(&row_major(build_sel_matrix(&ds).entries()), buf, capacity, needed)
    })
}

#[no_mangle]
pub unsafe extern "C" fn seli_factors_closed_form(spec: *const SeliSpec, out: *mut *mut SeliFactors) -> SeliStatus {
    guard(|| {
        let s = deref(spec, "spec")?;
        let f = lib(closed_form_svd_scaled(&s.0))?;
        write_out(out, Box::into_raw(Box::new(SeliFactors(f))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn seli_factors_free(f: *mut SeliFactors) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Rank k-1 of the factors, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn seli_factors_rank(f: *const SeliFactors) -> usize {
    f.as_ref().map_or(0, |f| f.0.rank())
}

#[no_mangle]
pub unsafe extern "C" fn seli_factors_singular_values(
    f: *const SeliFactors,
    buf: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> SeliStatus {
    guard(|| {
        let f = deref(f, "factors")?;
        write_buffer(f.0.lambda.as_slice(), buf, capacity, needed)
    })
}

/// Class-side factor, k x (k-1).
#[no_mangle]
pub unsafe extern "C" fn seli_factors_v(
    f: *const SeliFactors,
    buf: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> SeliStatus {
    guard(|| write_buffer(&row_major(&deref(f, "factors")?.0.v), buf, capacity, needed))
}

/// Example-side factor, n x (k-1).
#[no_mangle]
pub unsafe extern "C" fn seli_factors_u(
    f: *const SeliFactors,
    buf: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> SeliStatus {
    guard(|| write_buffer(&row_major(&deref(f, "factors")?.0.u), buf, capacity, needed))
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeliCertificate {
    pub spectral_norm: f64,
    pub row_sum_residual: f64,
    pub min_sign_agreement: f64,
    pub min_sign_example: usize,
    pub min_sign_class: usize,
    pub trace_gap: f64,
    /// 1 when every condition holds.
    pub valid: i32,
}

/// Diagnoses `B = U V^T` against the spec's SEL matrix. An invalid
/// certificate is reported through `valid`, not the status.
#[no_mangle]
pub unsafe extern "C" fn seli_certificate(
    spec: *const SeliSpec,
    f: *const SeliFactors,
    out: *mut SeliCertificate,
) -> SeliStatus {
    guard(|| {
        let s = deref(spec, "spec")?;
        let f = deref(f, "factors")?;
        let z = build_sel_matrix(&lib(build_dataset(&s.0))?);
        let c = lib(DualCertificate::diagnose(&f.0, &z))?;
        write_out(
            out,
            SeliCertificate {
                spectral_norm: c.spectral_norm,
                row_sum_residual: c.row_sum_residual,
                min_sign_agreement: c.min_sign_agreement,
                min_sign_example: c.min_sign_at.0,
                min_sign_class: c.min_sign_at.1,
                trace_gap: c.trace_gap,
                valid: c.violation().is_none() as i32,
            },
            "out",
        )
    })
}

/// Closed-form geometry; cosines between classes of one kind are NaN when
/// only one such class exists.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeliGeometry {
    pub norm_w_maj2: f64,
    pub norm_w_min2: f64,
    pub norm_h_maj2: f64,
    pub norm_h_min2: f64,
    pub cos_w_majmaj: f64,
    pub cos_w_minmin: f64,
    pub cos_w_majmin: f64,
    pub cos_h_majmaj: f64,
    pub cos_h_minmin: f64,
    pub cos_h_majmin: f64,
    pub align_maj: f64,
    pub align_min: f64,
}

#[no_mangle]
pub unsafe extern "C" fn seli_geometry(k: usize, r: f64, out: *mut SeliGeometry) -> SeliStatus {
    guard(|| {
        let g = lib(seli_closed_form(k, r))?;
        let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
        write_out(
            out,
            SeliGeometry {
                norm_w_maj2: g.norm_w_maj2,
                norm_w_min2: g.norm_w_min2,
                norm_h_maj2: g.norm_h_maj2,
                norm_h_min2: g.norm_h_min2,
                cos_w_majmaj: nan(g.cos_w_majmaj),
                cos_w_minmin: nan(g.cos_w_minmin),
                cos_w_majmin: g.cos_w_majmin,
                cos_h_majmaj: nan(g.cos_h_majmaj),
                cos_h_minmin: nan(g.cos_h_minmin),
                cos_h_majmin: g.cos_h_majmin,
                align_maj: g.align_maj,
                align_min: g.align_min,
            },
            "out",
        )
    })
}

/// Imbalance ratio above which minority classifiers collapse.
#[no_mangle]
pub extern "C" fn seli_minority_collapse_threshold(k: usize, rho: f64, lambda: f64) -> f64 {
    minority_collapse_threshold(k, rho, lambda)
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeliSolveInfo {
    pub objective: f64,
    pub kkt_residual: f64,
    pub min_margin: f64,
    pub iterations: usize,
    pub rank: usize,
    /// 1 when the KKT residual reached the tolerance.
    pub converged: i32,
}

/// Solves the nuclear-norm regularized CE program and writes the k x n
/// solution. `tol <= 0` and `max_iter == 0` select the defaults.
#[no_mangle]
pub unsafe extern "C" fn seli_solve(
    spec: *const SeliSpec,
    lambda: f64,
    tol: f64,
    max_iter: usize,
    buf: *mut f64,
    capacity: usize,
    needed: *mut usize,
    info: *mut SeliSolveInfo,
) -> SeliStatus {
    guard(|| {
        let s = deref(spec, "spec")?;
        let ds = lib(build_dataset(&s.0))?;
        let mut opts = SolverOptions::default();
        if tol > 0.0 {
            opts.tol = tol;
        }
        if max_iter > 0 {
            opts.max_iter = max_iter;
        }
        let res = lib(solve_nuc_reg(&ds, lambda, &opts))?;
        write_buffer(&row_major(&res.z), buf, capacity, needed)?;
        if !info.is_null() {
            info.write(SeliSolveInfo {
                objective: res.objective,
                kkt_residual: res.kkt.residual,
                min_margin: min_margin(&res.z, &ds),
                iterations: res.iterations,
                rank: res.kkt.rank,
                converged: res.converged as i32,
            });
        }
        Ok(())
    })
}
