//! C ABI for the DropAttention primitives and attention diagnostics, so
//! other languages can sample masks, apply DropAttention to their own
//! attention matrices and score attention distributions.
//!
//! Conventions: matrices are dense row-major `float` buffers owned by the
//! caller; RNG state lives behind an opaque handle created from a seed; every
//! function returns a `DaStatus` code and writes results through out
//! pointers. The header is generated into `include/dropattn.h` at build time.

use std::ffi::c_char;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dropattn::analysis;
use dropattn::dropattn::{apply_dropattention, sample_mask, DropSpec, Mode, Rescale, Variant};
use dropattn::tensor::Tensor;
use dropattn::Error;

/// Status codes returned by every FFI entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericError = 3,
}

/// DropAttention variant selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaVariant {
    Column = 0,
    Element = 1,
}

/// Rescale mode applied after masking.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaRescale {
    Normalized = 0,
    Inverse = 1,
}

/// Opaque deterministic RNG stream.
pub struct DaRng {
    inner: ChaCha8Rng,
}

fn status_of(err: &Error) -> DaStatus {
    match err {
        Error::NonFinite { .. } => DaStatus::NumericError,
        _ => DaStatus::InvalidArgument,
    }
}

impl From<DaVariant> for Variant {
    fn from(v: DaVariant) -> Variant {
        match v {
            DaVariant::Column => Variant::Column,
            DaVariant::Element => Variant::Element,
        }
    }
}

impl From<DaRescale> for Rescale {
    fn from(r: DaRescale) -> Rescale {
        match r {
            DaRescale::Normalized => Rescale::Normalized,
            DaRescale::Inverse => Rescale::Inverse,
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dropattn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create an RNG stream from a seed. Identical seeds replay identical masks.
///
/// # Safety
/// `out` must be a valid pointer to a `DaRng*` slot.
#[no_mangle]
pub unsafe extern "C" fn dropattn_rng_new(seed: u64, out: *mut *mut DaRng) -> DaStatus {
    if out.is_null() {
        return DaStatus::NullPointer;
    }
    let handle = Box::new(DaRng { inner: ChaCha8Rng::seed_from_u64(seed) });
    unsafe { *out = Box::into_raw(handle) };
    DaStatus::Ok
}

/// Destroy an RNG handle. Passing NULL is a no-op.
///
/// # Safety
/// `rng` must be NULL or a handle returned by `dropattn_rng_new` that has
/// not been freed already.
#[no_mangle]
pub unsafe extern "C" fn dropattn_rng_free(rng: *mut DaRng) {
    if !rng.is_null() {
        drop(unsafe { Box::from_raw(rng) });
    }
}

/// Sample a len×len keep/drop mask (1 = keep) for the given variant into
/// `out_mask`, which must hold len·len bytes.
///
/// # Safety
/// `rng` must be a live handle and `out_mask` must point to len·len
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dropattn_mask_sample(
    rng: *mut DaRng,
    len: usize,
    variant: DaVariant,
    p: f32,
    w: usize,
    out_mask: *mut u8,
) -> DaStatus {
    if rng.is_null() || out_mask.is_null() {
        return DaStatus::NullPointer;
    }
    if len == 0 {
        return DaStatus::InvalidArgument;
    }
    let spec = match DropSpec::new(variant.into(), p, w, Rescale::Normalized, Mode::Training) {
        Ok(s) => s,
        Err(e) => return status_of(&e),
    };
    let rng = unsafe { &mut *rng };
    match sample_mask(len, len, &spec, &mut rng.inner) {
        Ok(mask) => {
            let out = unsafe { std::slice::from_raw_parts_mut(out_mask, len * len) };
            out.copy_from_slice(mask.kept());
            DaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Apply DropAttention to a row-stochastic len×len matrix. With
/// `training = false` the input is copied through unchanged, matching
/// inference pass-through.
///
/// # Safety
/// `rng` must be a live handle; `lambda` and `out` must each point to
/// len·len readable/writable floats.
#[no_mangle]
pub unsafe extern "C" fn dropattn_apply(
    rng: *mut DaRng,
    lambda: *const f32,
    len: usize,
    variant: DaVariant,
    p: f32,
    w: usize,
    rescale: DaRescale,
    training: bool,
    out: *mut f32,
) -> DaStatus {
    if rng.is_null() || lambda.is_null() || out.is_null() {
        return DaStatus::NullPointer;
    }
    if len == 0 {
        return DaStatus::InvalidArgument;
    }
    let mode = if training { Mode::Training } else { Mode::Inference };
    let spec = match DropSpec::new(variant.into(), p, w, rescale.into(), mode) {
        Ok(s) => s,
        Err(e) => return status_of(&e),
    };
    let input = unsafe { std::slice::from_raw_parts(lambda, len * len) };
    let matrix = match Tensor::matrix(len, len, input.to_vec()) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    let rng = unsafe { &mut *rng };
    match apply_dropattention(&matrix, &spec, &mut rng.inner) {
        Ok(result) => {
            let out = unsafe { std::slice::from_raw_parts_mut(out, len * len) };
            out.copy_from_slice(result.data());
            DaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Shannon entropy of one attention row (natural log, 0·ln 0 = 0).
///
/// # Safety
/// `row` must point to `len` readable floats and `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn dropattn_entropy(row: *const f32, len: usize, out: *mut f64) -> DaStatus {
    if row.is_null() || out.is_null() {
        return DaStatus::NullPointer;
    }
    if len == 0 {
        return DaStatus::InvalidArgument;
    }
    let row = unsafe { std::slice::from_raw_parts(row, len) };
    match analysis::entropy_score(row) {
        Ok(h) => {
            unsafe { *out = h };
            DaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}

/// Head-overlap (Div) score over a heads×len row-major matrix of per-head
/// attention rows for one query.
///
/// # Safety
/// `rows` must point to heads·len readable floats and `out` to a writable
/// double.
#[no_mangle]
pub unsafe extern "C" fn dropattn_div(rows: *const f32, heads: usize, len: usize, out: *mut f64) -> DaStatus {
    if rows.is_null() || out.is_null() {
        return DaStatus::NullPointer;
    }
    if heads == 0 || len == 0 {
        return DaStatus::InvalidArgument;
    }
    let data = unsafe { std::slice::from_raw_parts(rows, heads * len) };
    let matrix = match Tensor::matrix(heads, len, data.to_vec()) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    unsafe { *out = analysis::div_score(&matrix) };
    DaStatus::Ok
}

/// Mean pairwise cosine similarity (Disagreement) over a heads×len matrix.
///
/// # Safety
/// `rows` must point to heads·len readable floats and `out` to a writable
/// double.
#[no_mangle]
pub unsafe extern "C" fn dropattn_disagreement(
    rows: *const f32,
    heads: usize,
    len: usize,
    out: *mut f64,
) -> DaStatus {
    if rows.is_null() || out.is_null() {
        return DaStatus::NullPointer;
    }
    if heads == 0 || len == 0 {
        return DaStatus::InvalidArgument;
    }
    let data = unsafe { std::slice::from_raw_parts(rows, heads * len) };
    let matrix = match Tensor::matrix(heads, len, data.to_vec()) {
        Ok(m) => m,
        Err(e) => return status_of(&e),
    };
    match analysis::disagreement_score(&matrix) {
        Ok(d) => {
            unsafe { *out = d };
            DaStatus::Ok
        }
        Err(e) => status_of(&e),
    }
}
