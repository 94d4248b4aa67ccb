//! C ABI over clipchain: load a denoiser (and optionally an autoencoder),
//! generate a long video, and copy the result out.
//!
//! Every function returns a [`ClipchainStatus`]; on failure a message is
//! available from [`clipchain_last_error`] on the same thread. Handles are
//! opaque, owned by the caller, and released with their `_free` function.
//! Panics never cross the boundary; they surface as `CLIPCHAIN_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use clipchain::archive::{load_autoencoder, load_denoiser, DenoiserMeta};
use clipchain::autoencoder::Autoencoder;
use clipchain::config::GenerateConfig;
use clipchain::denoiser::{LabelEncoder, TinyVideoDenoiser};
use clipchain::longvideo::generate_long_video;
use clipchain::manifest::verify;
use clipchain::{Clip, Error, ErrorClass, NoiseSchedule};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipchainStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Transport = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Long-video parameters; start from [`clipchain_generate_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipchainGenerateParams {
    pub clips: usize,
    pub frames: usize,
    pub prompt_frames: usize,
    pub alpha: f64,
    pub beta: f64,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
}

pub struct ClipchainModel {
    model: TinyVideoDenoiser,
    meta: DenoiserMeta,
}

pub struct ClipchainAutoencoder {
    ae: Autoencoder,
    latent_scale: f32,
}

/// Generated clips: latents always, pixels if an autoencoder was given.
pub struct ClipchainVideo {
    latents: Vec<Clip>,
    pixels: Option<Vec<Clip>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ClipchainStatus {
    match e.class() {
        ErrorClass::Config => ClipchainStatus::Config,
        ErrorClass::Data => ClipchainStatus::Data,
        ErrorClass::Numeric => ClipchainStatus::Numeric,
        ErrorClass::Transport => ClipchainStatus::Transport,
    }
}

struct Fail(ClipchainStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClipchainStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ClipchainStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            ClipchainStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ClipchainStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ClipchainStatus::InvalidString, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn clipchain_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clipchain_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn clipchain_generate_params_default() -> ClipchainGenerateParams {
    let g = GenerateConfig::default();
    ClipchainGenerateParams {
        clips: g.clips,
        frames: g.frames,
        prompt_frames: g.prompt_frames,
        alpha: g.alpha,
        beta: g.beta,
        guidance: g.guidance,
        steps: g.steps,
        seed: g.seed,
    }
}

/// Loads a denoiser checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clipchain_model_load(path: *const c_char, out: *mut *mut ClipchainModel) -> ClipchainStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let (model, meta) = load_denoiser(&PathBuf::from(read_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(ClipchainModel { model, meta }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`clipchain_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clipchain_model_free(model: *mut ClipchainModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of labels the model was trained with.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn clipchain_model_num_labels(model: *const ClipchainModel, out: *mut usize) -> ClipchainStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(out, "out")? = m.meta.vocabulary.len();
        Ok(())
    })
}

/// Copies label `index` (NUL-terminated) into `buf` of `len` bytes.
///
/// # Safety
/// `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn clipchain_model_label(
    model: *const ClipchainModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
) -> ClipchainStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let label = m
            .meta
            .vocabulary
            .get(index)
            .ok_or_else(|| Fail(ClipchainStatus::Config, format!("label index {index} out of range")))?;
        let bytes = label.as_bytes();
        if bytes.len() + 1 > len {
            return Err(Fail(
                ClipchainStatus::BufferTooSmall,
                format!("label needs {} bytes", bytes.len() + 1),
            ));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}

/// Loads an autoencoder checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clipchain_autoencoder_load(
    path: *const c_char,
    out: *mut *mut ClipchainAutoencoder,
) -> ClipchainStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let (ae, meta) = load_autoencoder(&PathBuf::from(read_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(ClipchainAutoencoder {
            ae,
            latent_scale: meta.latent_scale,
        }));
        Ok(())
    })
}

/// # Safety
/// `ae` must come from [`clipchain_autoencoder_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clipchain_autoencoder_free(ae: *mut ClipchainAutoencoder) {
    if !ae.is_null() {
        drop(Box::from_raw(ae));
    }
}

/// Generates a long video. `ae` and `label` may be null; a null label
/// picks the model's first label.
///
/// # Safety
/// Non-null pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clipchain_generate(
    model: *const ClipchainModel,
    ae: *const ClipchainAutoencoder,
    params: *const ClipchainGenerateParams,
    label: *const c_char,
    out: *mut *mut ClipchainVideo,
) -> ClipchainStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let g = GenerateConfig {
            clips: p.clips,
            frames: p.frames,
            prompt_frames: p.prompt_frames,
            alpha: p.alpha,
            beta: p.beta,
            guidance: p.guidance,
            steps: p.steps,
            seed: p.seed,
            ..GenerateConfig::default()
        };
        let lv = g.long_video();
        lv.validate()?;
        let label = if label.is_null() {
            m.meta
                .vocabulary
                .first()
                .cloned()
                .ok_or_else(|| Fail(ClipchainStatus::Data, "model has no labels".into()))?
        } else {
            read_str(label, "label")?.to_owned()
        };
        let cond = LabelEncoder::new(m.meta.vocabulary.clone(), m.model.spec.cond_dim, m.meta.label_seed).encode(&label)?;
        let schedule = NoiseSchedule::new(m.meta.num_timesteps, m.meta.schedule.clone())?;
        let spec = &m.model.spec;
        let mut lv = lv;
        lv.sampler.record_trajectory = false;
        let r = generate_long_video(&m.model, &schedule, &cond, [spec.channels, spec.height, spec.width], &lv)?;
        let pixels = match ae.as_ref() {
            Some(a) => Some(
                r.clips
                    .iter()
                    .map(|z| {
                        let mut z = z.clone();
                        z.data.iter_mut().for_each(|v| *v /= a.latent_scale);
                        a.ae.decode(&z)
                    })
                    .collect::<clipchain::Result<Vec<_>>>()?,
            ),
            None => None,
        };
        *out = Box::into_raw(Box::new(ClipchainVideo {
            latents: r.clips,
            pixels,
        }));
        Ok(())
    })
}

/// # Safety
/// `video` must come from [`clipchain_generate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clipchain_video_free(video: *mut ClipchainVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// Shape `[clips, frames, channels, height, width]` of the latents
/// (`pixels == 0`) or the decoded pixels (`pixels != 0`).
///
/// # Safety
/// `shape` must be writable for 5 values.
#[no_mangle]
pub unsafe extern "C" fn clipchain_video_shape(
    video: *const ClipchainVideo,
    pixels: i32,
    shape: *mut usize,
) -> ClipchainStatus {
    guard(|| {
        let clips = select(video, pixels)?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let s = clips[0].shape();
        let dims = [clips.len(), s[0], s[1], s[2], s[3]];
        ptr::copy_nonoverlapping(dims.as_ptr(), shape, 5);
        Ok(())
    })
}

unsafe fn select<'a>(video: *const ClipchainVideo, pixels: i32) -> Result<&'a [Clip], Fail> {
    let v = video.as_ref().ok_or_else(|| null("video"))?;
    if pixels == 0 {
        Ok(&v.latents)
    } else {
        v.pixels
            .as_deref()
            .ok_or_else(|| Fail(ClipchainStatus::Config, "video was generated without an autoencoder".into()))
    }
}

/// Copies all clips, in order, as row-major f32 into `buf` of `len` floats.
///
/// # Safety
/// `buf` must be writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn clipchain_video_copy(
    video: *const ClipchainVideo,
    pixels: i32,
    buf: *mut f32,
    len: usize,
) -> ClipchainStatus {
    guard(|| {
        let clips = select(video, pixels)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let need: usize = clips.iter().map(|c| c.data.len()).sum();
        if len < need {
            return Err(Fail(ClipchainStatus::BufferTooSmall, format!("need {need} floats, got {len}")));
        }
        let mut at = 0;
        for c in clips {
            ptr::copy_nonoverlapping(c.data.as_ptr(), buf.add(at), c.data.len());
            at += c.data.len();
        }
        Ok(())
    })
}

/// Re-derives the digests of a run directory; `*ok` is 1 if all match.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `ok` writable.
#[no_mangle]
pub unsafe extern "C" fn clipchain_verify_run(dir: *const c_char, ok: *mut i32) -> ClipchainStatus {
    guard(|| {
        let ok = out_ptr(ok, "ok")?;
        let report = verify(&PathBuf::from(read_str(dir, "dir")?))?;
        *ok = i32::from(report.ok());
        Ok(())
    })
}
