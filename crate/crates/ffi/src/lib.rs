//! C ABI for loading trained checkpoints and running age transforms.
//!
//! Images cross the boundary as `3 * R * R` doubles in `[-1, 1]`, channel-major.
//! Latent codes are `L * D` doubles, row-major. Every fallible call returns a
//! [`SamStatus`]; the message of the last failure on the calling thread is
//! available from [`sam_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sam_core::checkpoint::Checkpoint;
use sam_core::editing::{style_mix, StyleLayerRange};
use sam_core::encoder::SamModel;
use sam_core::evaluation::select_nearest_age;
use sam_core::losses::{age_weight, delta_age};
use sam_core::oracles::AgePredictor;
use sam_core::training::sam_from_checkpoint;
use sam_core::types::{AgeYears, Image, LatentCode};
use sam_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Format = 5,
    Runtime = 6,
    Panic = 7,
}

/// A trained model loaded from a `sam` checkpoint.
pub struct SamModelHandle {
    model: SamModel,
}

/// A frozen age predictor loaded from an `age_predictor` checkpoint.
pub struct SamAgePredictorHandle {
    predictor: AgePredictor,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SamStatus {
    match e {
        Error::Range(_) => SamStatus::OutOfRange,
        Error::Invalid(_) | Error::Shape { .. } => SamStatus::InvalidArgument,
        Error::Io { .. } => SamStatus::Io,
        Error::Format { .. } | Error::Version { .. } | Error::Missing(_) | Error::Image(_) => SamStatus::Format,
        _ => SamStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SamStatus, String)>) -> SamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SamStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SamStatus::Panic
        }
    }
}

fn fail(e: Error) -> (SamStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SamStatus, String) {
    (SamStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (SamStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (SamStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, want: usize, what: &str) -> Result<&'a [f64], (SamStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != want {
        return Err((SamStatus::InvalidArgument, format!("`{what}` has {len} values, expected {want}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, want: usize, what: &str) -> Result<&'a mut [f64], (SamStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < want {
        return Err((SamStatus::InvalidArgument, format!("`{what}` holds {len} values, need {want}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, want))
}

/// Message of the most recent failure on this thread; empty if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sam_model_load(path: *const c_char, out: *mut *mut SamModelHandle) -> SamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let ckpt = Checkpoint::load(path).map_err(fail)?;
        let (model, _) = sam_from_checkpoint(&ckpt, false).map_err(fail)?;
        *out = Box::into_raw(Box::new(SamModelHandle { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`sam_model_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sam_model_free(model: *mut SamModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side length and latent shape of a loaded model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sam_model_shape(
    model: *const SamModelHandle,
    resolution: *mut usize,
    layers: *mut usize,
    dim: *mut usize,
) -> SamStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if resolution.is_null() || layers.is_null() || dim.is_null() {
            return Err(null("out"));
        }
        *resolution = m.model.generator.resolution();
        *layers = m.model.generator.layers();
        *dim = m.model.generator.dim();
        Ok(())
    })
}

unsafe fn image_arg(m: &SamModel, pixels: *const f64, len: usize) -> Result<Image, (SamStatus, String)> {
    let r = m.generator.resolution();
    let data = slice_arg(pixels, len, 3 * r * r, "pixels")?;
    Image::from_vec(r, data.to_vec()).map_err(fail)
}

/// Transforms an image to `target_age`; writes `3 * R * R` values to `out`.
///
/// # Safety
/// `pixels` must hold `pixels_len` doubles and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sam_transform(
    model: *const SamModelHandle,
    pixels: *const f64,
    pixels_len: usize,
    target_age: f64,
    out: *mut f64,
    out_len: usize,
) -> SamStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let x = image_arg(m, pixels, pixels_len)?;
        let target = AgeYears::target(target_age).map_err(fail)?;
        let y = m.sam_transform(&x, target).map_err(fail)?.to_vec().map_err(fail)?;
        out_slice(out, out_len, y.len(), "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// The latent code the model produces for `target_age`; writes `L * D` values.
///
/// # Safety
/// As for [`sam_transform`].
#[no_mangle]
pub unsafe extern "C" fn sam_transform_latent(
    model: *const SamModelHandle,
    pixels: *const f64,
    pixels_len: usize,
    target_age: f64,
    out: *mut f64,
    out_len: usize,
) -> SamStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let x = image_arg(m, pixels, pixels_len)?;
        let target = AgeYears::target(target_age).map_err(fail)?;
        let code = m.transform_latent(&x, target).map_err(fail)?.to_vec().map_err(fail)?;
        out_slice(out, out_len, code.len(), "out")?.copy_from_slice(&code);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sam_age_predictor_load(
    path: *const c_char,
    out: *mut *mut SamAgePredictorHandle,
) -> SamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(path_arg(path)?).map_err(fail)?;
        let predictor = AgePredictor::from_checkpoint(&ckpt).map_err(fail)?;
        *out = Box::into_raw(Box::new(SamAgePredictorHandle { predictor }));
        Ok(())
    })
}

/// # Safety
/// `predictor` must come from [`sam_age_predictor_load`]. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn sam_age_predictor_free(predictor: *mut SamAgePredictorHandle) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}

/// Predicted age in years of a `resolution x resolution` image.
///
/// # Safety
/// `pixels` must hold `pixels_len` doubles; `out_age` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sam_age_predict(
    predictor: *const SamAgePredictorHandle,
    pixels: *const f64,
    pixels_len: usize,
    resolution: usize,
    out_age: *mut f64,
) -> SamStatus {
    guard(|| {
        let p = &predictor.as_ref().ok_or_else(|| null("predictor"))?.predictor;
        if out_age.is_null() {
            return Err(null("out_age"));
        }
        let data = slice_arg(pixels, pixels_len, 3 * resolution * resolution, "pixels")?;
        let img = Image::from_vec(resolution, data.to_vec()).map_err(fail)?;
        *out_age = p.predict_age(&img).map_err(fail)?.0;
        Ok(())
    })
}

/// Rows `start..=end` from `reference`, the rest from `base`; all `layers * dim` long.
///
/// # Safety
/// `base`, `reference` and `out` must each hold `layers * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sam_style_mix(
    base: *const f64,
    reference: *const f64,
    layers: usize,
    dim: usize,
    start: usize,
    end: usize,
    out: *mut f64,
) -> SamStatus {
    guard(|| {
        let n = layers * dim;
        let a = LatentCode::from_vec(layers, dim, slice_arg(base, n, n, "base")?.to_vec()).map_err(fail)?;
        let b = LatentCode::from_vec(layers, dim, slice_arg(reference, n, n, "reference")?.to_vec()).map_err(fail)?;
        let range = StyleLayerRange::new(start, end).map_err(fail)?;
        let mixed = style_mix(&a, &b, range).map_err(fail)?.to_vec().map_err(fail)?;
        out_slice(out, n, n, "out")?.copy_from_slice(&mixed);
        Ok(())
    })
}

/// `|source - target| / 100`.
#[no_mangle]
pub extern "C" fn sam_delta_age(source: f64, target: f64) -> f64 {
    delta_age(AgeYears(source), AgeYears(target))
}

/// Identity-loss weight for a normalized age difference in `[0, 1]`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sam_age_weight(delta: f64, out: *mut f64) -> SamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = age_weight(delta).map_err(fail)?;
        Ok(())
    })
}

/// Index of the prediction nearest to `target` (lowest index on ties).
///
/// # Safety
/// `predicted` must hold `n` doubles; `out_index` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sam_select_nearest_age(
    predicted: *const f64,
    n: usize,
    target: f64,
    out_index: *mut usize,
) -> SamStatus {
    guard(|| {
        if out_index.is_null() {
            return Err(null("out_index"));
        }
        let p = slice_arg(predicted, n, n, "predicted")?;
        *out_index = select_nearest_age(p, target).map_err(fail)?;
        Ok(())
    })
}
