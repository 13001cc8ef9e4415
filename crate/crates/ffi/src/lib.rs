//! C ABI over the trained pipeline: load a checkpoint, query its geometry,
//! and synthesize target modalities into caller-owned buffers.
//!
//! All functions return a `CdmStatus` code; `cdm_last_error` retrieves the
//! detail message for the most recent failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::Path;

use cdm_core::image::{ImageBatch, ValueRange};
use cdm_core::pipeline::{synthesize, CheckpointBundle};
use cdm_core::CdmError;
use ndarray::Array4;

/// Opaque handle to a loaded checkpoint.
pub struct CdmCheckpoint {
    bundle: CheckpointBundle,
}

/// Status codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdmStatus {
    CdmOk = 0,
    CdmErrIo = 1,
    CdmErrInvalid = 2,
    CdmErrOrder = 3,
    CdmErrNullArgument = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: CdmStatus, message: impl Into<String>) -> CdmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn fail_from(err: CdmError) -> CdmStatus {
    let status = match &err {
        CdmError::Io(_) | CdmError::CorruptFile { .. } => CdmStatus::CdmErrIo,
        CdmError::MissingStage { .. } => CdmStatus::CdmErrOrder,
        _ => CdmStatus::CdmErrInvalid,
    };
    fail(status, err.to_string())
}

/// Copy the most recent error message on this thread into `buf` (NUL
/// terminated, truncated to `cap` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null (length query).
#[no_mangle]
pub unsafe extern "C" fn cdm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Load a checkpoint file into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdm_checkpoint_load(
    path: *const c_char,
    out: *mut *mut CdmCheckpoint,
) -> CdmStatus {
    if path.is_null() || out.is_null() {
        return fail(CdmStatus::CdmErrNullArgument, "null path or out pointer");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return fail(CdmStatus::CdmErrInvalid, "path is not valid UTF-8"),
    };
    match CheckpointBundle::read(Path::new(path)) {
        Ok(bundle) => {
            *out = Box::into_raw(Box::new(CdmCheckpoint { bundle }));
            CdmStatus::CdmOk
        }
        Err(e) => fail_from(e),
    }
}

/// Release a handle. Null is a no-op.
///
/// # Safety
/// `handle` must have come from `cdm_checkpoint_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn cdm_checkpoint_free(handle: *mut CdmCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Side length of the square images this checkpoint was trained on, or 0
/// for a null handle.
///
/// # Safety
/// `handle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cdm_checkpoint_image_size(handle: *const CdmCheckpoint) -> u32 {
    if handle.is_null() {
        return 0;
    }
    (*handle).bundle.config.image_size as u32
}

/// 1 if all three training stages are present, else 0.
///
/// # Safety
/// `handle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cdm_checkpoint_is_complete(handle: *const CdmCheckpoint) -> i32 {
    if handle.is_null() {
        return 0;
    }
    (*handle).bundle.is_complete() as i32
}

/// Synthesize the two target modalities from the two source modalities.
///
/// `source` holds T1 then T2, each `size*size` row-major floats in [0,1];
/// `out` receives T1c then T2f in the same layout. Deterministic in `seed`.
///
/// # Safety
/// `source` and `out` must each point to `2*size*size` readable/writable
/// floats for the handle's image size.
#[no_mangle]
pub unsafe extern "C" fn cdm_synthesize(
    handle: *const CdmCheckpoint,
    source: *const f32,
    seed: u64,
    out: *mut f32,
) -> CdmStatus {
    if handle.is_null() || source.is_null() || out.is_null() {
        return fail(CdmStatus::CdmErrNullArgument, "null handle or buffer");
    }
    let bundle = &(*handle).bundle;
    let s = bundle.config.image_size;
    let src = std::slice::from_raw_parts(source, 2 * s * s);
    let mut data = Array4::zeros((1, 2, s, s));
    for c in 0..2 {
        for i in 0..s {
            for j in 0..s {
                data[[0, c, i, j]] = f64::from(src[c * s * s + i * s + j]).clamp(0.0, 1.0);
            }
        }
    }
    let batch = ImageBatch {
        data,
        range: ValueRange::Unit,
    };
    match synthesize(bundle, &batch, seed) {
        Ok(pred) => {
            let dst = std::slice::from_raw_parts_mut(out, 2 * s * s);
            for c in 0..2 {
                for i in 0..s {
                    for j in 0..s {
                        dst[c * s * s + i * s + j] = pred.data[[0, c, i, j]] as f32;
                    }
                }
            }
            CdmStatus::CdmOk
        }
        Err(e) => fail_from(e),
    }
}
