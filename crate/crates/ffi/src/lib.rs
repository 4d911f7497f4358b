//! C ABI over the hquic codec.
//!
//! Every fallible call returns an [`HquicStatus`]; on failure the message is
//! available from [`hquic_last_error`] on the same thread. Buffers and images
//! handed out by the library must be released with the matching `*_free`.
//! Panics never cross the boundary; they surface as `HQUIC_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use hquic::codec::{compress, decompress};
use hquic::image::ImageTensor;
use hquic::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HquicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Io = 4,
    Format = 5,
    Incompatible = 6,
    Decode = 7,
    Internal = 8,
}

/// A loaded, frozen model. Opaque to C.
pub struct HquicModel {
    inner: hquic::codec::HquicModel,
}

/// Library-owned bytes. Release with [`hquic_buffer_free`].
#[repr(C)]
pub struct HquicBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// Library-owned packed RGB8 image, row-major, `3 * width * height` bytes.
/// Release with [`hquic_image_free`].
#[repr(C)]
pub struct HquicImage {
    pub pixels: *mut u8,
    pub width: usize,
    pub height: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    // interior NULs would truncate the C string; replace them
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(HquicStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => HquicStatus::NotFound,
            Error::Io { .. } => HquicStatus::Io,
            Error::Format { .. } => HquicStatus::Format,
            Error::Incompatible(_) => HquicStatus::Incompatible,
            Error::Decode(_) => HquicStatus::Decode,
            Error::Dimension(_) | Error::Shape(_) | Error::Domain(_) | Error::Range(_) | Error::Config(_) => {
                HquicStatus::InvalidArgument
            }
            Error::Precondition(_) | Error::NonFinite { .. } => HquicStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HquicStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HquicStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HquicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HquicStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HquicStatus::Internal
        }
    }
}

/// # Safety
/// `pixels` must be null or point to `3 * width * height` readable bytes.
unsafe fn rgb8<'a>(pixels: *const u8, width: usize, height: usize) -> Result<&'a [u8], Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    if width == 0 || height == 0 {
        return Err(invalid("image must be at least 1x1"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| invalid("image size overflows"))?;
    Ok(std::slice::from_raw_parts(pixels, len))
}

fn into_raw(bytes: Vec<u8>) -> (*mut u8, usize) {
    let boxed = bytes.into_boxed_slice();
    let len = boxed.len();
    (Box::into_raw(boxed) as *mut u8, len)
}

/// # Safety
/// `data`/`len` must come from [`into_raw`] and not have been freed.
unsafe fn free_raw(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hquic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hquic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint and tabulates its entropy model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hquic_model_load(path: *const c_char, out: *mut *mut HquicModel) -> HquicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let mut inner = hquic::checkpoint::load(path)?.model;
        if !inner.is_frozen() {
            inner.freeze();
        }
        *out = Box::into_raw(Box::new(HquicModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`hquic_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hquic_model_free(model: *mut HquicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the 8-byte model identity that bitstreams are checked against.
///
/// # Safety
/// `model` must be a live handle; `out` must point to 8 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hquic_model_param_hash(model: *const HquicModel, out: *mut u8) -> HquicStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let hash = model.inner.param_hash();
        std::ptr::copy_nonoverlapping(hash.as_ptr(), out, hash.len());
        Ok(())
    })
}

/// Compresses a packed RGB8 image into a bitstream.
///
/// # Safety
/// `model` must be a live handle, `pixels` must hold `3 * width * height`
/// bytes, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hquic_compress(
    model: *const HquicModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    out: *mut HquicBuffer,
) -> HquicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = HquicBuffer {
            data: std::ptr::null_mut(),
            len: 0,
        };
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let img = ImageTensor::from_rgb8(width, height, rgb8(pixels, width, height)?);
        let (data, len) = into_raw(compress(&model.inner, &img)?);
        *out = HquicBuffer { data, len };
        Ok(())
    })
}

/// Decodes a bitstream produced by the same model.
///
/// # Safety
/// `model` must be a live handle, `data` must hold `len` readable bytes, and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hquic_decompress(
    model: *const HquicModel,
    data: *const u8,
    len: usize,
    out: *mut HquicImage,
) -> HquicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = HquicImage {
            pixels: std::ptr::null_mut(),
            width: 0,
            height: 0,
        };
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if data.is_null() {
            return Err(null("data"));
        }
        let img = decompress(&model.inner, std::slice::from_raw_parts(data, len))?;
        let (width, height) = (img.width(), img.height());
        let (pixels, _) = into_raw(img.to_rgb8());
        *out = HquicImage { pixels, width, height };
        Ok(())
    })
}

/// PSNR in dB between two packed RGB8 images of equal size. Identical
/// images give +infinity.
///
/// # Safety
/// `a` and `b` must each hold `3 * width * height` bytes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hquic_psnr(
    a: *const u8,
    b: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
) -> HquicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = ImageTensor::from_rgb8(width, height, rgb8(a, width, height)?);
        let y = ImageTensor::from_rgb8(width, height, rgb8(b, width, height)?);
        *out = hquic::evaluation::psnr(&x, &y)?;
        Ok(())
    })
}

/// Releases a buffer from [`hquic_compress`] and resets it. Null-safe.
///
/// # Safety
/// `buf` must be null or point to a buffer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn hquic_buffer_free(buf: *mut HquicBuffer) {
    if let Some(buf) = buf.as_mut() {
        free_raw(buf.data, buf.len);
        buf.data = std::ptr::null_mut();
        buf.len = 0;
    }
}

/// Releases an image from [`hquic_decompress`] and resets it. Null-safe.
///
/// # Safety
/// `img` must be null or point to an image returned by this library.
#[no_mangle]
pub unsafe extern "C" fn hquic_image_free(img: *mut HquicImage) {
    if let Some(img) = img.as_mut() {
        free_raw(img.pixels, 3 * img.width * img.height);
        img.pixels = std::ptr::null_mut();
        img.width = 0;
        img.height = 0;
    }
}
