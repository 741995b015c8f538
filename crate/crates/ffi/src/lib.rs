//! C interface: load an inference checkpoint and recognize images.
//!
//! Every function returns an [`SvtrStatus`]. After a failure,
//! [`svtr_last_error`] copies a message describing it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use svtrv2::ctc::greedy_decode;
use svtrv2::model::SvtrV2;
use svtrv2::msr::{resize_bilinear, Charset, ResizeMode};
use svtrv2::nn::ParamStore;
use svtrv2::tensor::Tensor;
use svtrv2::train::load_checkpoint;
use svtrv2::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvtrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvtrResize {
    Msr = 0,
    Fixed32x128 = 1,
    Fixed64x256 = 2,
}

impl From<SvtrResize> for ResizeMode {
    fn from(r: SvtrResize) -> Self {
        match r {
            SvtrResize::Msr => ResizeMode::Msr,
            SvtrResize::Fixed32x128 => ResizeMode::Fixed32x128,
            SvtrResize::Fixed64x256 => ResizeMode::Fixed64x256,
        }
    }
}

/// Opaque recognizer handle.
pub struct SvtrModel {
    model: SvtrV2,
    store: ParamStore<f32>,
    charset: Charset,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SvtrStatus {
    match e {
        Error::Io { .. } => SvtrStatus::Io,
        Error::Format(_) => SvtrStatus::Format,
        Error::Config(_) | Error::Mode { .. } => SvtrStatus::Config,
        Error::Input(_) | Error::Shape(_) | Error::Dimension { .. } | Error::Size(_) => SvtrStatus::InvalidArgument,
        _ => SvtrStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SvtrStatus, String)>) -> SvtrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvtrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SvtrStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (SvtrStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SvtrStatus, String) {
    (SvtrStatus::NullPointer, format!("{what} is null"))
}

/// Loads a checkpoint from a NUL-terminated UTF-8 path. Checkpoints that
/// still carry the guidance branch are accepted; it is dropped on load.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn svtr_model_load(path: *const c_char, out: *mut *mut SvtrModel) -> SvtrStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SvtrStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = load_checkpoint(Path::new(p)).map_err(lib_err)?;
        let (model, store) = ckpt.to_model().map_err(lib_err)?;
        let (model, store) = if model.has_sgm() {
            model.strip_for_inference(&store).map_err(lib_err)?
        } else {
            (model, store)
        };
        *out = Box::into_raw(Box::new(SvtrModel {
            model,
            store,
            charset: ckpt.charset,
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`svtr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn svtr_model_free(model: *mut SvtrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of characters in the model's charset (blank excluded).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn svtr_model_num_classes(model: *const SvtrModel, out: *mut usize) -> SvtrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.charset.len();
        Ok(())
    })
}

/// Recognizes one image.
///
/// `pixels` holds `height * width * channels` values in `[0, 1]`, row-major
/// with interleaved channels; `channels` is 1 or 3. The UTF-8 result plus a
/// NUL terminator is written to `text` (capacity `text_cap` bytes) and its
/// byte length, without the terminator, to `text_len`. When the buffer is
/// too small, `text_len` still receives the needed length and the call
/// returns `SVTR_STATUS_BUFFER_TOO_SMALL`. `confidence` may be null.
///
/// # Safety
/// `pixels` must point to the stated number of floats and `text` to
/// `text_cap` writable bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn svtr_recognize(
    model: *const SvtrModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    resize: SvtrResize,
    text: *mut c_char,
    text_cap: usize,
    text_len: *mut usize,
    confidence: *mut f64,
) -> SvtrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let text_len = text_len.as_mut().ok_or_else(|| null("text_len"))?;
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err((
                SvtrStatus::InvalidArgument,
                format!("bad image geometry {height}x{width}x{channels}"),
            ));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| (SvtrStatus::InvalidArgument, "image too large".to_string()))?;
        let src = std::slice::from_raw_parts(pixels, n);
        let mut planar = vec![0.0f32; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let sc = if channels == 1 { 0 } else { c };
                    planar[(c * height + y) * width + x] = src[(y * width + x) * channels + sc];
                }
            }
        }
        let img = Tensor::new(&[3, height, width], planar).map_err(lib_err)?;
        let mode = ResizeMode::from(resize);
        let target = mode.target(height, width).map_err(lib_err)?;
        let img = resize_bilinear(&img, target).map_err(lib_err)?;
        let logits = m.model.logits(&m.store, &[&img]).map_err(lib_err)?;
        let (frames, classes) = (logits.shape()[1], logits.shape()[2]);
        let decoded = greedy_decode(&logits.reshape(&[frames, classes]).map_err(lib_err)?).map_err(lib_err)?;
        let s = m.charset.decode(&decoded.indices);
        *text_len = s.len();
        if let Some(c) = confidence.as_mut() {
            *c = decoded.confidence;
        }
        if text.is_null() || text_cap < s.len() + 1 {
            return Err((
                SvtrStatus::BufferTooSmall,
                format!("result needs {} bytes", s.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), text.cast::<u8>(), s.len());
        *text.add(s.len()) = 0;
        Ok(())
    })
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to fit) and returns its full byte length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn svtr_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn svtr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
