//! C ABI over `kpbe`.
//!
//! Models and encoded sources are opaque handles created and freed through
//! this interface. Every fallible call returns a [`KpbeStatus`]; on failure a
//! human-readable message is available from [`kpbe_last_error_message`] on
//! the same thread. Images cross the boundary as interleaved 8-bit RGB,
//! row-major, `height * width * 3` bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kpbe::config::ModelConfig;
use kpbe::frame::ImageTensor;
use kpbe::geometry::{HeadPose, RotationMatrix};
use kpbe::metrics::{self, Image8, Psnr};
use kpbe::model::{Kpbe, SourceFeatures};
use kpbe::training::Checkpoint;
use kpbe::KpbeError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KpbeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    InvalidRotation = 4,
    Config = 5,
    Checkpoint = 6,
    Io = 7,
    Frames = 8,
    Contract = 9,
    NonFiniteLoss = 10,
    EndOfStream = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&KpbeError> for KpbeStatus {
    fn from(e: &KpbeError) -> Self {
        match e {
            KpbeError::InvalidArgument(_) => Self::InvalidArgument,
            KpbeError::ShapeMismatch(_) => Self::ShapeMismatch,
            KpbeError::Contract(_) => Self::Contract,
            KpbeError::InvalidRotation(_) => Self::InvalidRotation,
            KpbeError::Config(_) => Self::Config,
            KpbeError::Checkpoint(_) => Self::Checkpoint,
            KpbeError::Frames { .. } | KpbeError::Image(_) => Self::Frames,
            KpbeError::EndOfStream => Self::EndOfStream,
            KpbeError::NonFiniteLoss { .. } => Self::NonFiniteLoss,
            KpbeError::Io(_) | KpbeError::Json(_) | KpbeError::Csv(_) => Self::Io,
        }
    }
}

/// A loaded or freshly initialized model.
pub struct KpbeModel {
    inner: Kpbe,
}

/// A source image encoded once (appearance, canonical keypoints, source
/// pose and expression), ready to drive many frames.
pub struct KpbeSource {
    model: Kpbe,
    features: SourceFeatures,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(KpbeStatus, String);

impl From<KpbeError> for Failure {
    fn from(e: KpbeError) -> Self {
        Self(KpbeStatus::from(&e), e.to_string())
    }
}

type FfiResult = Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> KpbeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KpbeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            KpbeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(KpbeStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(KpbeStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn rgb_bytes<'a>(data: *const u8, height: usize, width: usize) -> Result<&'a [u8], Failure> {
    if data.is_null() {
        return Err(null("image data"));
    }
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Failure(KpbeStatus::InvalidArgument, "image size overflows".into()))?;
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn rgb_arg(data: *const u8, height: usize, width: usize) -> Result<ImageTensor, Failure> {
    Ok(ImageTensor::from_rgb8(height, width, rgb_bytes(data, height, width)?)?)
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> FfiResult {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn kpbe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kpbe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a model with the default configuration and seeded random weights.
///
/// # Safety
/// `out` must be a valid pointer to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn kpbe_model_new(seed: u64, out: *mut *mut KpbeModel) -> KpbeStatus {
    guard(|| {
        let inner = Kpbe::new(ModelConfig::default(), seed)?;
        write_out(out, KpbeModel { inner })
    })
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn kpbe_model_load(path: *const c_char, out: *mut *mut KpbeModel) -> KpbeStatus {
    guard(|| {
        let path = path_arg(path)?;
        let inner = Checkpoint::load(&path)?.model;
        write_out(out, KpbeModel { inner })
    })
}

/// Frees a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kpbe_model_free(model: *mut KpbeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the model works at, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kpbe_model_resolution(model: *const KpbeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().resolution)
}

/// Encodes a source image. Images of another size are resized.
///
/// # Safety
/// `model` must be live, `rgb` must hold `height * width * 3` bytes and
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn kpbe_source_new(
    model: *const KpbeModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut *mut KpbeSource,
) -> KpbeStatus {
    guard(|| {
        let model = deref(model, "model")?.inner.clone();
        let res = model.config().resolution;
        let image = rgb_arg(rgb, height, width)?.resized(res, res);
        let features = model.encode_source(&image)?;
        write_out(out, KpbeSource { model, features })
    })
}

/// Frees an encoded source. NULL is ignored.
///
/// # Safety
/// `source` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kpbe_source_free(source: *mut KpbeSource) {
    if !source.is_null() {
        drop(Box::from_raw(source));
    }
}

unsafe fn emit(
    source: &KpbeSource,
    pose: &HeadPose,
    backend: &ImageTensor,
    out_rgb: *mut u8,
    out_len: usize,
) -> FfiResult {
    let res = source.model.config().resolution;
    let expression = source.model.estimate_pose_expression(backend)?.expression;
    let frame = source.model.synthesize(&source.features, pose, &expression)?;
    let bytes = frame.image.to_rgb8();
    if out_rgb.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < bytes.len() {
        return Err(Failure(
            KpbeStatus::BufferTooSmall,
            format!("output buffer holds {out_len} bytes, a {res}x{res} frame needs {}", bytes.len()),
        ));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), out_rgb, bytes.len());
    Ok(())
}

/// Synthesizes one frame: expression from the backend frame, head pose from
/// the pose-driving frame. Both inputs are `height x width` RGB; the output
/// is written at the model resolution (`resolution * resolution * 3` bytes).
///
/// # Safety
/// `source` must be live; the input buffers must hold `height * width * 3`
/// bytes and `out_rgb` must hold `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn kpbe_enhance_frame(
    source: *const KpbeSource,
    backend_rgb: *const u8,
    driver_rgb: *const u8,
    height: usize,
    width: usize,
    out_rgb: *mut u8,
    out_len: usize,
) -> KpbeStatus {
    guard(|| {
        let source = deref(source, "source")?;
        let res = source.model.config().resolution;
        let backend = rgb_arg(backend_rgb, height, width)?.resized(res, res);
        let driver = rgb_arg(driver_rgb, height, width)?.resized(res, res);
        let pose = source.model.estimate_pose_expression(&driver)?.pose;
        emit(source, &pose, &backend, out_rgb, out_len)
    })
}

/// Synthesizes one frame under a user head pose: `rotation` is a row-major
/// 3x3 matrix (must be orthonormal), `translation` three components in
/// `[-1, 1]`. The rotation is checked before any synthesis.
///
/// # Safety
/// `source` must be live; `rotation` must point to 9 doubles and
/// `translation` to 3; buffers as in [`kpbe_enhance_frame`].
#[no_mangle]
pub unsafe extern "C" fn kpbe_reenact_frame(
    source: *const KpbeSource,
    backend_rgb: *const u8,
    height: usize,
    width: usize,
    rotation: *const f64,
    translation: *const f64,
    out_rgb: *mut u8,
    out_len: usize,
) -> KpbeStatus {
    guard(|| {
        let source = deref(source, "source")?;
        if rotation.is_null() || translation.is_null() {
            return Err(null("pose"));
        }
        let r = std::slice::from_raw_parts(rotation, 9);
        let t = std::slice::from_raw_parts(translation, 3);
        let m = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
        let pose = HeadPose::new(RotationMatrix::new(m)?, [t[0], t[1], t[2]])?;
        let res = source.model.config().resolution;
        let backend = rgb_arg(backend_rgb, height, width)?.resized(res, res);
        emit(source, &pose, &backend, out_rgb, out_len)
    })
}

unsafe fn image8(data: *const u8, height: usize, width: usize) -> Result<Image8, Failure> {
    Ok(Image8::rgb(height, width, rgb_bytes(data, height, width)?.to_vec())?)
}

/// PSNR in dB between two RGB images. Identical images set `*identical`
/// to 1 and `*db` to infinity.
///
/// # Safety
/// Both buffers must hold `height * width * 3` bytes; `db` and `identical`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn kpbe_psnr(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    db: *mut f64,
    identical: *mut i32,
) -> KpbeStatus {
    guard(|| {
        if db.is_null() || identical.is_null() {
            return Err(null("result pointer"));
        }
        let p = metrics::psnr(&image8(a, height, width)?, &image8(b, height, width)?)?;
        *identical = i32::from(p == Psnr::Identical);
        *db = p.db();
        Ok(())
    })
}

/// Mean SSIM between two RGB images of at least 11x11 pixels.
///
/// # Safety
/// Both buffers must hold `height * width * 3` bytes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn kpbe_ssim(a: *const u8, b: *const u8, height: usize, width: usize, out: *mut f64) -> KpbeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("result pointer"));
        }
        *out = metrics::ssim(&image8(a, height, width)?, &image8(b, height, width)?)?;
        Ok(())
    })
}
