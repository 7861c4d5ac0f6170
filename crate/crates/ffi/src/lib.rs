//! C ABI for the `triattn` crate.
//!
//! Every entry point returns a [`TriattnStatus`]; on failure the message is
//! available from [`triattn_last_error`] on the same thread. Objects are
//! handed out as opaque handles and must be released with the matching
//! `*_free` function.
//!
//! Vector sets (keys, values, context) are passed as `n` contiguous vectors
//! of length `d`: element `x` of vector `k` sits at `ptr[k * d + x]`.
//! Attention weights come back row-major over `(i, j)`, index `i * J + j`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use triattn::bi::{bi_attend, BiParams, BiVariant};
use triattn::grad::{gradcheck_report, Dims, GradcheckRequest};
use triattn::init::seeded;
use triattn::model::{tan_forward, Example, SavedModel};
use triattn::tensor::{Matrix, Vector};
use triattn::tri::{tri_attend, tri_normalize, tri_score, TriParams, TriVariant, ValueIntegration};
use triattn::Error;

pub const TRIATTN_VARIANT_TADD: u32 = 0;
pub const TRIATTN_VARIANT_TDP: u32 = 1;
pub const TRIATTN_VARIANT_TSDP: u32 = 2;
pub const TRIATTN_VARIANT_TRILI_FULL: u32 = 3;
pub const TRIATTN_VARIANT_TRILI_ECON: u32 = 4;

pub const TRIATTN_INTEGRATION_ADD: u32 = 0;
pub const TRIATTN_INTEGRATION_MUL: u32 = 1;
pub const TRIATTN_INTEGRATION_BILI: u32 = 2;

pub const TRIATTN_BI_ADD: u32 = 0;
pub const TRIATTN_BI_DP: u32 = 1;
pub const TRIATTN_BI_SDP: u32 = 2;
pub const TRIATTN_BI_BILI: u32 = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriattnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Capacity = 4,
    NonFinite = 5,
    Diverged = 6,
    Io = 7,
    Parse = 8,
    Panic = 9,
}

/// Parameters of one tri-attention score / integration pair.
pub struct TriattnParams {
    variant: TriVariant,
    integration: ValueIntegration,
    d: usize,
    params: TriParams,
}

/// Parameters of one bi-attention score.
pub struct TriattnBiParams {
    variant: BiVariant,
    d: usize,
    params: BiParams,
}

/// A trained matching model.
pub struct TriattnModel {
    saved: SavedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TriattnStatus {
    match e {
        Error::Shape(_) => TriattnStatus::Shape,
        Error::InvalidArgument(_) => TriattnStatus::InvalidArgument,
        Error::Capacity(_) => TriattnStatus::Capacity,
        Error::NonFinite { .. } => TriattnStatus::NonFinite,
        Error::Diverged { .. } => TriattnStatus::Diverged,
        Error::Io(_) => TriattnStatus::Io,
        Error::Json(_) => TriattnStatus::Parse,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Lib(Error::InvalidArgument(msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TriattnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TriattnStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_last_error(&format!("null pointer: {what}"));
            TriattnStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            TriattnStatus::Panic
        }
    }
}

fn tri_variant(v: u32) -> Result<TriVariant, Fail> {
    TriVariant::ALL
        .get(v as usize)
        .copied()
        .ok_or_else(|| invalid(format!("unknown tri variant code {v}")))
}

fn integration(v: u32) -> Result<ValueIntegration, Fail> {
    match v {
        TRIATTN_INTEGRATION_ADD => Ok(ValueIntegration::Additive),
        TRIATTN_INTEGRATION_MUL => Ok(ValueIntegration::Multiplicative),
        TRIATTN_INTEGRATION_BILI => Ok(ValueIntegration::Bilinear),
        _ => Err(invalid(format!("unknown integration code {v}"))),
    }
}

fn bi_variant(v: u32) -> Result<BiVariant, Fail> {
    match v {
        TRIATTN_BI_ADD => Ok(BiVariant::Add),
        TRIATTN_BI_DP => Ok(BiVariant::Dp),
        TRIATTN_BI_SDP => Ok(BiVariant::Sdp),
        TRIATTN_BI_BILI => Ok(BiVariant::Bili),
        _ => Err(invalid(format!("unknown bi variant code {v}"))),
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller guarantees `ptr` points at `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller guarantees `ptr` points at `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, len) })
}

unsafe fn vectors(ptr: *const f64, n: usize, d: usize, what: &'static str) -> Result<Matrix, Fail> {
    if n == 0 || d == 0 {
        return Err(invalid(format!("{what}: empty vector set")));
    }
    let flat = unsafe { slice(ptr, n * d, what)? };
    let cols: Vec<&[f64]> = flat.chunks(d).collect();
    Ok(Matrix::from_cols(&cols)?)
}

unsafe fn handle<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: caller passes a live handle from the matching constructor.
    unsafe { ptr.as_ref() }.ok_or(Fail::Null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    // SAFETY: `out` is non-null and writable per the caller contract.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn triattn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Fan-in uniform parameters for `variant` / `integration` at width `d`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn triattn_params_new(
    variant: u32,
    integration_code: u32,
    d: usize,
    seed: u64,
    out: *mut *mut TriattnParams,
) -> TriattnStatus {
    guard(|| {
        let variant = tri_variant(variant)?;
        let integration = integration(integration_code)?;
        if d == 0 {
            return Err(invalid("d must be positive"));
        }
        let params = TriParams::init(variant, integration, d, &mut seeded(seed))?;
        unsafe { store(out, TriattnParams { variant, integration, d, params }) }
    })
}

/// # Safety
/// `params` must come from [`triattn_params_new`] and not be freed yet, or
/// be NULL.
#[no_mangle]
pub unsafe extern "C" fn triattn_params_free(params: *mut TriattnParams) {
    if !params.is_null() {
        // SAFETY: allocated by `store` and owned by the caller.
        drop(unsafe { Box::from_raw(params) });
    }
}

/// Contextual attention embedding of `q` (length `d`) into `out` (length `d`).
///
/// # Safety
/// Array arguments must hold `d`, `n_keys * d`, `n_keys * d`, `n_ctx * d`
/// and `d` elements.
#[no_mangle]
pub unsafe extern "C" fn triattn_tri_attend(
    params: *const TriattnParams,
    q: *const f64,
    keys: *const f64,
    values: *const f64,
    n_keys: usize,
    ctx: *const f64,
    n_ctx: usize,
    out: *mut f64,
) -> TriattnStatus {
    guard(|| {
        let p = unsafe { handle(params, "params")? };
        let d = p.d;
        let q = Vector::from(unsafe { slice(q, d, "q")? }.to_vec());
        let k = unsafe { vectors(keys, n_keys, d, "keys")? };
        let v = unsafe { vectors(values, n_keys, d, "values")? };
        let c = unsafe { vectors(ctx, n_ctx, d, "ctx")? };
        let out = unsafe { slice_mut(out, d, "out")? };
        let e = tri_attend(&q, &k, &v, &c, p.variant, p.integration, &p.params)?;
        out.copy_from_slice(e.as_slice());
        Ok(())
    })
}

/// Normalised `n_keys x n_ctx` weight grid into `out`.
///
/// # Safety
/// Array arguments must hold `d`, `n_keys * d`, `n_ctx * d` and
/// `n_keys * n_ctx` elements.
#[no_mangle]
pub unsafe extern "C" fn triattn_tri_weights(
    params: *const TriattnParams,
    q: *const f64,
    keys: *const f64,
    n_keys: usize,
    ctx: *const f64,
    n_ctx: usize,
    out: *mut f64,
) -> TriattnStatus {
    guard(|| {
        let p = unsafe { handle(params, "params")? };
        let d = p.d;
        let q = Vector::from(unsafe { slice(q, d, "q")? }.to_vec());
        let k = unsafe { vectors(keys, n_keys, d, "keys")? };
        let c = unsafe { vectors(ctx, n_ctx, d, "ctx")? };
        let out = unsafe { slice_mut(out, n_keys * n_ctx, "out")? };
        let w = tri_normalize(&tri_score(p.variant, &q, &k, &c, &p.params)?)?;
        out.copy_from_slice(w.as_slice());
        Ok(())
    })
}

/// Fan-in uniform bi-attention parameters at width `d`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn triattn_bi_params_new(
    variant: u32,
    d: usize,
    seed: u64,
    out: *mut *mut TriattnBiParams,
) -> TriattnStatus {
    guard(|| {
        let variant = bi_variant(variant)?;
        if d == 0 {
            return Err(invalid("d must be positive"));
        }
        let params = BiParams::init(variant, d, &mut seeded(seed));
        unsafe { store(out, TriattnBiParams { variant, d, params }) }
    })
}

/// # Safety
/// `params` must come from [`triattn_bi_params_new`] and not be freed yet,
/// or be NULL.
#[no_mangle]
pub unsafe extern "C" fn triattn_bi_params_free(params: *mut TriattnBiParams) {
    if !params.is_null() {
        // SAFETY: allocated by `store` and owned by the caller.
        drop(unsafe { Box::from_raw(params) });
    }
}

/// Bi-attention embedding of `q` into `out` (both length `d`).
///
/// # Safety
/// Array arguments must hold `d`, `n_keys * d`, `n_keys * d` and `d`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn triattn_bi_attend(
    params: *const TriattnBiParams,
    q: *const f64,
    keys: *const f64,
    values: *const f64,
    n_keys: usize,
    out: *mut f64,
) -> TriattnStatus {
    guard(|| {
        let p = unsafe { handle(params, "params")? };
        let d = p.d;
        let q = Vector::from(unsafe { slice(q, d, "q")? }.to_vec());
        let k = unsafe { vectors(keys, n_keys, d, "keys")? };
        let v = unsafe { vectors(values, n_keys, d, "values")? };
        let out = unsafe { slice_mut(out, d, "out")? };
        let e = bi_attend(&q, &k, &v, p.variant, &p.params)?;
        out.copy_from_slice(e.as_slice());
        Ok(())
    })
}

/// Loads a model saved by `triattn train --out`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn triattn_model_load(path: *const c_char, out: *mut *mut TriattnModel) -> TriattnStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        // SAFETY: non-null, NUL-terminated per the caller contract.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let saved = SavedModel::load(Path::new(path))?;
        unsafe { store(out, TriattnModel { saved }) }
    })
}

/// # Safety
/// `model` must come from [`triattn_model_load`] and not be freed yet, or
/// be NULL.
#[no_mangle]
pub unsafe extern "C" fn triattn_model_free(model: *mut TriattnModel) {
    if !model.is_null() {
        // SAFETY: allocated by `store` and owned by the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Class probabilities for one token-id pair into `probs` (length 2).
///
/// # Safety
/// `seq_a` / `seq_b` must hold `len_a` / `len_b` elements, `probs` two.
#[no_mangle]
pub unsafe extern "C" fn triattn_model_predict(
    model: *const TriattnModel,
    seq_a: *const u32,
    len_a: usize,
    seq_b: *const u32,
    len_b: usize,
    probs: *mut f64,
) -> TriattnStatus {
    guard(|| {
        let m = unsafe { handle(model, "model")? };
        let ex = Example {
            seq_a: unsafe { slice(seq_a, len_a, "seq_a")? }.iter().map(|&t| t as usize).collect(),
            seq_b: unsafe { slice(seq_b, len_b, "seq_b")? }.iter().map(|&t| t as usize).collect(),
            label: 0,
        };
        let out = unsafe { slice_mut(probs, 2, "probs")? };
        let p = tan_forward(&m.saved.state, &ex, &m.saved.config, false, None)?;
        out.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Gradient check of one variant / integration pair with `n_keys` keys and
/// `n_ctx` context vectors. The JSON report is written to `out` and must be
/// released with [`triattn_string_free`]; `pass` receives 1 or 0.
///
/// # Safety
/// `out` and `pass` must be valid, writable pointers.
#[no_mangle]
pub unsafe extern "C" fn triattn_gradcheck_json(
    variant: u32,
    integration_code: u32,
    d: usize,
    n_keys: usize,
    n_ctx: usize,
    seed: u64,
    out: *mut *mut c_char,
    pass: *mut i32,
) -> TriattnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if pass.is_null() {
            return Err(Fail::Null("pass"));
        }
        let req = GradcheckRequest::new(
            tri_variant(variant)?,
            integration(integration_code)?,
            Dims { d, i: n_keys, j: n_ctx },
            seed,
        );
        let report = gradcheck_report(&req)?;
        let text = CString::new(report.to_json()).map_err(|_| invalid("report contains NUL"))?;
        // SAFETY: both pointers checked non-null above.
        unsafe {
            *pass = i32::from(report.pass);
            *out = text.into_raw();
        }
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed yet, or be NULL.
#[no_mangle]
pub unsafe extern "C" fn triattn_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by `CString::into_raw` in this crate.
        drop(unsafe { CString::from_raw(s) });
    }
}
