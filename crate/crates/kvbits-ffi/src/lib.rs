//! C ABI for the kvbits allocation pipeline.
//!
//! Conventions:
//! - Every constructor returns a status code and writes an opaque handle
//!   through an out-pointer; handles are freed with the matching `_free`.
//! - `KVBITS_STATUS_OK` (0) signals success; on any failure the thread-local
//!   message from [`kvbits_last_error`] describes the cause.
//! - All pointers must be non-null unless documented otherwise; strings are
//!   NUL-terminated UTF-8.
//!
//! The header `include/kvbits.h` is generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use kvbits::allocator::{allocate_kv_joint, allocate_kv_separate, KvAllocation};
use kvbits::distortion::{DistortionModel, DistortionModelFile, MsePoint};
use kvbits::sensitivity::SensitivityMap;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvbitsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseError = 4,
    CalibrationFailure = 5,
    Infeasible = 6,
    IoError = 7,
    InternalError = 8,
}

/// Opaque per-head sensitivity map.
pub struct KvbitsSensitivity(SensitivityMap);

/// Opaque exponential distortion model.
pub struct KvbitsModel(DistortionModel);

/// Opaque solved bit-allocation table.
pub struct KvbitsAllocation(KvAllocation);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl std::fmt::Display) {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
}

fn status_for(err: &kvbits::Error) -> KvbitsStatus {
    use kvbits::Error::*;
    match err {
        Io { .. } => KvbitsStatus::IoError,
        Parse { .. } => KvbitsStatus::ParseError,
        CalibrationFailure { .. } | NotEnoughPoints(_) | NonPositiveMse { .. } => {
            KvbitsStatus::CalibrationFailure
        }
        InfeasibleBudget { .. } => KvbitsStatus::Infeasible,
        _ => KvbitsStatus::InvalidArgument,
    }
}

fn fail(err: kvbits::Error) -> KvbitsStatus {
    let status = status_for(&err);
    set_error(err);
    status
}

/// Run `body`, converting panics into `InternalError`.
fn guarded(body: impl FnOnce() -> KvbitsStatus) -> KvbitsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            KvbitsStatus::InternalError
        }
    }
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, KvbitsStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(KvbitsStatus::NullArgument);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(KvbitsStatus::InvalidUtf8)
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, KvbitsStatus> {
    if ptr.is_null() {
        set_error("null string");
        return Err(KvbitsStatus::NullArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        KvbitsStatus::InvalidUtf8
    })
}

macro_rules! require_nonnull {
    ($ptr:expr) => {
        if $ptr.is_null() {
            set_error(concat!("null argument: ", stringify!($ptr)));
            return KvbitsStatus::NullArgument;
        }
    };
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn kvbits_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread; valid until the next
/// failing call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn kvbits_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Sensitivity maps
// ---------------------------------------------------------------------------

/// Load and validate a sensitivity JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvbits_sensitivity_load(
    path: *const c_char,
    out: *mut *mut KvbitsSensitivity,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(out);
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match SensitivityMap::load(&path) {
            Ok(map) => {
                unsafe { *out = Box::into_raw(Box::new(KvbitsSensitivity(map))) };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Draw a synthetic log-normal sensitivity map (`ln w ~ N(mu, sigma^2)`).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvbits_sensitivity_synth(
    num_layers: usize,
    num_kv_heads: usize,
    mu: f64,
    sigma: f64,
    seed: u64,
    out: *mut *mut KvbitsSensitivity,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(out);
        match kvbits::synth_lognormal(num_layers, num_kv_heads, mu, sigma, seed) {
            Ok(map) => {
                unsafe { *out = Box::into_raw(Box::new(KvbitsSensitivity(map))) };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Write a sensitivity map back to JSON.
///
/// # Safety
/// `sens` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kvbits_sensitivity_save(
    sens: *const KvbitsSensitivity,
    path: *const c_char,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(sens);
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match unsafe { &(*sens).0 }.save(&path) {
            Ok(()) => KvbitsStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Layer and head counts of a map.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_sensitivity_dims(
    sens: *const KvbitsSensitivity,
    num_layers: *mut usize,
    num_kv_heads: *mut usize,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(sens);
        require_nonnull!(num_layers);
        require_nonnull!(num_kv_heads);
        let map = unsafe { &(*sens).0 };
        unsafe {
            *num_layers = map.num_layers;
            *num_kv_heads = map.num_kv_heads;
        }
        KvbitsStatus::Ok
    })
}

/// AM/GM gain-ratio predictor over all 2N weights.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_sensitivity_gain_ratio(
    sens: *const KvbitsSensitivity,
    out: *mut f64,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(sens);
        require_nonnull!(out);
        let map = unsafe { &(*sens).0 };
        match kvbits::predict_gain(&map.flat_all()) {
            Ok(ratio) => {
                unsafe { *out = ratio };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a sensitivity handle. Null is ignored.
///
/// # Safety
/// `sens` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn kvbits_sensitivity_free(sens: *mut KvbitsSensitivity) {
    if !sens.is_null() {
        drop(unsafe { Box::from_raw(sens) });
    }
}

// ---------------------------------------------------------------------------
// Distortion models
// ---------------------------------------------------------------------------

/// Least-squares fit of `D(b) = alpha * beta^(-b)` from parallel
/// `bits`/`mse` arrays of length `len`.
///
/// # Safety
/// `bits` and `mse` must point to `len` readable doubles; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_model_fit(
    bits: *const f64,
    mse: *const f64,
    len: usize,
    out: *mut *mut KvbitsModel,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(bits);
        require_nonnull!(mse);
        require_nonnull!(out);
        let bits = unsafe { std::slice::from_raw_parts(bits, len) };
        let mse = unsafe { std::slice::from_raw_parts(mse, len) };
        let points: Vec<MsePoint> = bits
            .iter()
            .zip(mse)
            .map(|(&b, &m)| MsePoint { bits: b, mse: m })
            .collect();
        match kvbits::fit_exponential(&points) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(KvbitsModel(model))) };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Build a model from known coefficients.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvbits_model_from_params(
    alpha: f64,
    beta: f64,
    out: *mut *mut KvbitsModel,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(out);
        match DistortionModel::from_params(alpha, beta) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(KvbitsModel(model))) };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_model_load(
    path: *const c_char,
    out: *mut *mut KvbitsModel,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(out);
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let loaded = DistortionModelFile::load(&path).and_then(|f| f.to_model());
        match loaded {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(KvbitsModel(model))) };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Write a model JSON file under the given quantizer/component labels.
///
/// # Safety
/// All pointer arguments must be valid NUL-terminated strings/handles.
#[no_mangle]
pub unsafe extern "C" fn kvbits_model_save(
    model: *const KvbitsModel,
    quantizer: *const c_char,
    component: *const c_char,
    path: *const c_char,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(model);
        let quantizer = match unsafe { str_arg(quantizer) } {
            Ok(s) => s,
            Err(s) => return s,
        };
        let component = match unsafe { str_arg(component) } {
            Ok(s) => s,
            Err(s) => return s,
        };
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let file =
            DistortionModelFile::from_model(unsafe { &(*model).0 }, quantizer, component);
        match file.save(&path) {
            Ok(()) => KvbitsStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Read back `alpha`, `beta` and the fit quality. Null outputs are skipped.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kvbits_model_params(
    model: *const KvbitsModel,
    alpha: *mut f64,
    beta: *mut f64,
    r_squared: *mut f64,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(model);
        let m = unsafe { &(*model).0 };
        unsafe {
            if !alpha.is_null() {
                *alpha = m.alpha;
            }
            if !beta.is_null() {
                *beta = m.beta;
            }
            if !r_squared.is_null() {
                *r_squared = m.r_squared;
            }
        }
        KvbitsStatus::Ok
    })
}

/// Evaluate `D(bits)`.
///
/// # Safety
/// `model` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_model_eval(
    model: *const KvbitsModel,
    bits: f64,
    out: *mut f64,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(model);
        require_nonnull!(out);
        unsafe { *out = (*model).0.eval(bits) };
        KvbitsStatus::Ok
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn kvbits_model_free(model: *mut KvbitsModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Exact per-element MSE of the optimal `2^bits`-level Gaussian scalar
/// quantizer, `bits` in 1..=8.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvbits_lloyd_max_mse(bits: u32, out: *mut f64) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(out);
        match kvbits::lloyd_max_mse(bits) {
            Ok(mse) => {
                unsafe { *out = mse };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

// ---------------------------------------------------------------------------
// Allocation
// ---------------------------------------------------------------------------

/// Greedy integer allocation over 2N independent key/value components.
///
/// # Safety
/// All handles must be live; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_allocate_separate(
    sens: *const KvbitsSensitivity,
    model_k: *const KvbitsModel,
    model_v: *const KvbitsModel,
    avg_bits: f64,
    b_min: u32,
    b_max: u32,
    out: *mut *mut KvbitsAllocation,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(sens);
        require_nonnull!(model_k);
        require_nonnull!(model_v);
        require_nonnull!(out);
        let result = allocate_kv_separate(
            unsafe { &(*sens).0 },
            unsafe { &(*model_k).0 },
            unsafe { &(*model_v).0 },
            avg_bits,
            b_min,
            b_max,
        );
        match result {
            Ok(kv) => {
                unsafe { *out = Box::into_raw(Box::new(KvbitsAllocation(kv))) };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Greedy integer allocation with one shared per-head bit-width for both
/// caches.
///
/// # Safety
/// All handles must be live; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_allocate_joint(
    sens: *const KvbitsSensitivity,
    model: *const KvbitsModel,
    avg_bits: f64,
    b_min: u32,
    b_max: u32,
    out: *mut *mut KvbitsAllocation,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(sens);
        require_nonnull!(model);
        require_nonnull!(out);
        let result = allocate_kv_joint(
            unsafe { &(*sens).0 },
            unsafe { &(*model).0 },
            avg_bits,
            b_min,
            b_max,
        );
        match result {
            Ok(kv) => {
                unsafe { *out = Box::into_raw(Box::new(KvbitsAllocation(kv))) };
                KvbitsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Per-side means, achieved objective and predicted gain ratio. Null outputs
/// are skipped.
///
/// # Safety
/// `alloc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kvbits_allocation_summary(
    alloc: *const KvbitsAllocation,
    mean_bits_k: *mut f64,
    mean_bits_v: *mut f64,
    objective: *mut f64,
    predicted_gain_ratio: *mut f64,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(alloc);
        let kv = unsafe { &(*alloc).0 };
        unsafe {
            if !mean_bits_k.is_null() {
                *mean_bits_k = kv.mean_bits_k;
            }
            if !mean_bits_v.is_null() {
                *mean_bits_v = kv.mean_bits_v;
            }
            if !objective.is_null() {
                *objective = kv.objective;
            }
            if !predicted_gain_ratio.is_null() {
                *predicted_gain_ratio = kv.predicted_gain_ratio;
            }
        }
        KvbitsStatus::Ok
    })
}

/// Total bit budget of the allocation.
///
/// # Safety
/// `alloc` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_allocation_budget(
    alloc: *const KvbitsAllocation,
    out: *mut i64,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(alloc);
        require_nonnull!(out);
        unsafe { *out = (*alloc).0.budget };
        KvbitsStatus::Ok
    })
}

/// Bit-width for one (layer, head) entry; `side` 0 selects keys, 1 values.
///
/// # Safety
/// `alloc` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kvbits_allocation_bits(
    alloc: *const KvbitsAllocation,
    side: c_int,
    layer: usize,
    head: usize,
    out: *mut u32,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(alloc);
        require_nonnull!(out);
        let kv = unsafe { &(*alloc).0 };
        let grid = match side {
            0 => &kv.bits_k,
            1 => &kv.bits_v,
            _ => {
                set_error(format!("side must be 0 (keys) or 1 (values), got {side}"));
                return KvbitsStatus::InvalidArgument;
            }
        };
        match grid.get(layer).and_then(|row| row.get(head)) {
            Some(&bits) => {
                unsafe { *out = bits };
                KvbitsStatus::Ok
            }
            None => {
                set_error(format!("(layer {layer}, head {head}) out of range"));
                KvbitsStatus::InvalidArgument
            }
        }
    })
}

/// Write the allocation lookup table JSON.
///
/// # Safety
/// `alloc` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kvbits_allocation_save(
    alloc: *const KvbitsAllocation,
    path: *const c_char,
) -> KvbitsStatus {
    guarded(|| {
        require_nonnull!(alloc);
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let file = kvbits::allocator::AllocationFile::from_kv(unsafe { &(*alloc).0 }, vec![]);
        match file.save(&path) {
            Ok(()) => KvbitsStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Release an allocation handle. Null is ignored.
///
/// # Safety
/// `alloc` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn kvbits_allocation_free(alloc: *mut KvbitsAllocation) {
    if !alloc.is_null() {
        drop(unsafe { Box::from_raw(alloc) });
    }
}
