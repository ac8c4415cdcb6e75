//! C ABI over the geossl backbone: load a checkpoint's teacher backbone as an
//! opaque handle, query its shape and extract frozen features.
//!
//! Every fallible function returns a [`GeosslStatus`]; on failure the message
//! is available from [`geossl_last_error`] on the same thread until the next
//! failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::str::FromStr;

use geossl::checkpoint;
use geossl::error::Error;
use geossl::eval::{extract_features, FeatureKind};
use geossl::vit::{param_count, ModelSize, ViTParams};
use geossl::Image;

/// Result codes; the non-zero values match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeosslStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    /// A null pointer, a bad string or an undersized output buffer.
    InvalidArgument = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque handle to a frozen backbone.
pub struct GeosslModel {
    params: ViTParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> GeosslStatus {
    match e.exit_code() {
        2 => GeosslStatus::Config,
        3 => GeosslStatus::Data,
        4 => GeosslStatus::Numeric,
        _ => GeosslStatus::Internal,
    }
}

enum Failure {
    Lib(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GeosslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GeosslStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            GeosslStatus::InvalidArgument
        }
        Err(_) => {
            set_error("panic inside geossl");
            GeosslStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(model: *const GeosslModel) -> Result<&'a GeosslModel, Failure> {
    model
        .as_ref()
        .ok_or_else(|| Failure::Arg("model handle is null".into()))
}

/// Reads `count` square RGB images of side `side`, channel-interleaved
/// `f32` values in [0, 1], stored back to back.
unsafe fn images_arg(rgb: *const f32, count: usize, side: usize) -> Result<Vec<Image>, Failure> {
    if rgb.is_null() {
        return Err(Failure::Arg("pixel buffer is null".into()));
    }
    if count == 0 || side == 0 {
        return Err(Failure::Arg("image count and side must be positive".into()));
    }
    let per = side * side * 3;
    let all = std::slice::from_raw_parts(rgb, per * count);
    Ok(all
        .chunks_exact(per)
        .map(|c| Image {
            height: side,
            width: side,
            data: c.to_vec(),
        })
        .collect())
}

unsafe fn copy_out(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Arg("output buffer is null".into()));
    }
    if out_len < values.len() {
        return Err(Failure::Arg(format!(
            "output buffer holds {out_len} values, {} needed",
            values.len()
        )));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn geossl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads the teacher backbone of a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn geossl_model_load(
    path: *const c_char,
    out: *mut *mut GeosslModel,
) -> GeosslStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("output handle pointer is null".into()));
        }
        let path = str_arg(path, "path")?;
        let params = checkpoint::load_backbone(Path::new(path))?;
        *out = Box::into_raw(Box::new(GeosslModel { params }));
        Ok(())
    })
}

/// Releases a handle from [`geossl_model_load`]; null is ignored.
///
/// # Safety
/// `model` must come from [`geossl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn geossl_model_free(model: *mut GeosslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width of the backbone, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn geossl_model_embed_dim(model: *const GeosslModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.embed_dim)
}

/// Patch side length of the backbone, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn geossl_model_patch_size(model: *const GeosslModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.patch_size)
}

/// Learnable parameter count of the backbone, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn geossl_model_param_count(model: *const GeosslModel) -> u64 {
    model.as_ref().map_or(0, |m| param_count(&m.params.config))
}

/// Parameter count of a named size (`small` … `giant`) at 224-pixel input.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn geossl_param_count_named(
    name: *const c_char,
    out: *mut u64,
) -> GeosslStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("output pointer is null".into()));
        }
        let size = ModelSize::from_str(str_arg(name, "name")?)
            .map_err(|m| Failure::Lib(Error::Config(m)))?;
        *out = param_count(&size.config());
        Ok(())
    })
}

/// Class-token features of `count` images into `out` (`count × embed_dim`,
/// row-major).
///
/// # Safety
/// `rgb` must hold `count × side × side × 3` floats and `out` at least
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn geossl_model_class_features(
    model: *const GeosslModel,
    rgb: *const f32,
    count: usize,
    side: usize,
    out: *mut f64,
    out_len: usize,
) -> GeosslStatus {
    guard(|| {
        let model = model_arg(model)?;
        let images = images_arg(rgb, count, side)?;
        let features = extract_features(&images, &model.params, FeatureKind::Class)?;
        copy_out(features.values(), out, out_len)
    })
}

/// Patch-token features of one image into `out` (`(side/patch)² ×
/// embed_dim`, raster order).
///
/// # Safety
/// `rgb` must hold `side × side × 3` floats and `out` at least `out_len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn geossl_model_patch_features(
    model: *const GeosslModel,
    rgb: *const f32,
    side: usize,
    out: *mut f64,
    out_len: usize,
) -> GeosslStatus {
    guard(|| {
        let model = model_arg(model)?;
        let images = images_arg(rgb, 1, side)?;
        let features = extract_features(&images, &model.params, FeatureKind::Patch)?;
        copy_out(features.values(), out, out_len)
    })
}
