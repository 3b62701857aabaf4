//! C ABI over `lmf-core`.
//!
//! Every function returns an [`LmfStatus`]. On failure the thread-local
//! message from [`lmf_last_error_message`] describes the cause. Objects are
//! opaque heap handles released with their `*_free` function; passing NULL to
//! a free function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use lmf_core::cmsr::{cmsr_render_detailed, Scale2ModsTable};
use lmf_core::cost::{macs_lmf, macs_vanilla, LmfDims, VanillaDims};
use lmf_core::decoder::{DecoderKind, Model};
use lmf_core::{Error, Image};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Parse = 4,
    Checksum = 5,
    UnsupportedVersion = 6,
    InvalidModel = 7,
    Io = 8,
    Numeric = 9,
    Overflow = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmfDecoderKind {
    Vanilla = 0,
    C2f = 1,
    Lmf = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmfDimsPreset {
    Liif = 0,
    LmLiif = 1,
}

pub struct LmfModel(Model);
pub struct LmfImage(Image);
pub struct LmfTable(Scale2ModsTable);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LmfStatus {
    match e {
        Error::LayerShape { .. } | Error::Shape(_) | Error::ModulationArity { .. } | Error::StaleTape(_) => {
            LmfStatus::Shape
        }
        Error::Domain(_) | Error::Data(_) => LmfStatus::InvalidArgument,
        Error::Parse { .. } => LmfStatus::Parse,
        Error::Checksum { .. } => LmfStatus::Checksum,
        Error::UnsupportedVersion { .. } => LmfStatus::UnsupportedVersion,
        Error::InvalidModel(_) => LmfStatus::InvalidModel,
        Error::Io(_) => LmfStatus::Io,
        Error::Numeric(_) => LmfStatus::Numeric,
        Error::CostOverflow => LmfStatus::Overflow,
    }
}

struct Fail(LmfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LmfStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LmfStatus::Ok
        }
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            LmfStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LmfStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn put_u64(out: *mut u64, v: u128) -> Result<(), Fail> {
    if !out.is_null() {
        *out = u64::try_from(v).map_err(|_| Fail(LmfStatus::Overflow, "count exceeds 64 bits".into()))?;
    }
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lmf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_model_load(path: *const c_char, out: *mut *mut LmfModel) -> LmfStatus {
    guard(|| {
        let file = lmf_core::load_model(path_arg(path)?)?;
        put(out, LmfModel(file.model))
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`lmf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn lmf_model_free(model: *mut LmfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_model_kind(model: *const LmfModel, out: *mut LmfDecoderKind) -> LmfStatus {
    guard(|| {
        let m = obj(model, "model")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = match m.0.kind() {
            DecoderKind::Vanilla => LmfDecoderKind::Vanilla,
            DecoderKind::C2f => LmfDecoderKind::C2f,
            DecoderKind::Lmf => LmfDecoderKind::Lmf,
        };
        Ok(())
    })
}

/// Copy `height * width * channels` interleaved values into a new image.
///
/// # Safety
/// `data` must point to that many doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut LmfImage,
) -> LmfStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Fail(LmfStatus::Overflow, "image size overflows".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        put(out, LmfImage(Image::from_vec(height, width, channels, values)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_image_read_pnm(path: *const c_char, out: *mut *mut LmfImage) -> LmfStatus {
    guard(|| put(out, LmfImage(lmf_core::read_pnm(path_arg(path)?)?)))
}

/// Values are clamped to [0, 1] and written with 8 bits per sample.
///
/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lmf_image_write_pnm(image: *const LmfImage, path: *const c_char) -> LmfStatus {
    guard(|| {
        let img = obj(image, "image")?;
        lmf_core::write_pnm(&img.0.clamp01(), path_arg(path)?)?;
        Ok(())
    })
}

/// Any of the output pointers may be NULL.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmf_image_dims(
    image: *const LmfImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> LmfStatus {
    guard(|| {
        let (h, w, c) = obj(image, "image")?.0.dims();
        for (p, v) in [(height, h), (width, w), (channels, c)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the interleaved row-major values, or NULL.
///
/// # Safety
/// `image` must be NULL or a live handle; the pointer dies with the image.
#[no_mangle]
pub unsafe extern "C" fn lmf_image_data(image: *const LmfImage) -> *const f64 {
    image.as_ref().map_or(std::ptr::null(), |i| i.0.data().as_ptr())
}

/// # Safety
/// `image` must be NULL or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lmf_image_free(image: *mut LmfImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Full render at scale `scale`. `decoder_macs` (nullable) receives the
/// latent plus render linear-layer multiply-accumulates.
///
/// # Safety
/// Handles must be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_upsample(
    model: *const LmfModel,
    image: *const LmfImage,
    scale: f64,
    out: *mut *mut LmfImage,
    decoder_macs: *mut u64,
) -> LmfStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let img = obj(image, "image")?;
        let (sr, stats) = m.0.upsample_counted(&img.0, scale)?;
        put_u64(decoder_macs, stats.costs.decoder_linear())?;
        put(out, LmfImage(sr))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_table_load(path: *const c_char, out: *mut *mut LmfTable) -> LmfStatus {
    guard(|| {
        let text = std::fs::read_to_string(path_arg(path)?).map_err(Error::from)?;
        put(out, LmfTable(Scale2ModsTable::from_text(&text)?))
    })
}

/// # Safety
/// `table` must be NULL or a handle from [`lmf_table_load`].
#[no_mangle]
pub unsafe extern "C" fn lmf_table_free(table: *mut LmfTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Multi-scale render driven by `table`. Both counters are nullable.
///
/// # Safety
/// Handles must be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_cmsr(
    model: *const LmfModel,
    table: *const LmfTable,
    image: *const LmfImage,
    scale: f64,
    out: *mut *mut LmfImage,
    rendered_pixels: *mut u64,
    decoder_macs: *mut u64,
) -> LmfStatus {
    guard(|| {
        let m = obj(model, "model")?
            .0
            .as_lmf()
            .ok_or_else(|| Fail(LmfStatus::InvalidModel, "multi-scale rendering needs an lmf model".into()))?;
        let t = obj(table, "table")?;
        let img = obj(image, "image")?;
        let o = cmsr_render_detailed(m, &img.0, scale, &t.0)?;
        put_u64(rendered_pixels, o.rendered_pixels as u128)?;
        put_u64(decoder_macs, o.costs.decoder_linear())?;
        put(out, LmfImage(o.image))
    })
}

/// Closed-form decoder MACs for an `h x w` input at scale `scale`.
/// `preset` is an [`LmfDimsPreset`] value.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmf_macs(
    preset: i32,
    h: usize,
    w: usize,
    scale: f64,
    out: *mut u64,
) -> LmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let v = match preset {
            p if p == LmfDimsPreset::Liif as i32 => macs_vanilla(&VanillaDims::LIIF, h, w, scale)?,
            p if p == LmfDimsPreset::LmLiif as i32 => macs_lmf(&LmfDims::LM_LIIF, h, w, scale)?,
            p => return Err(Fail(LmfStatus::InvalidArgument, format!("unknown dims preset {p}"))),
        };
        put_u64(out, v)
    })
}
