//! C ABI over `entitydrag`.
//!
//! Every function returns an [`EdStatus`]; on failure the message is
//! available from [`ed_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use entitydrag::diffusion::VideoModel;
use entitydrag::entity_rep::{ConditioningMode, Trajectory};
use entitydrag::geometry::{self, Mask};
use entitydrag::synth::{dataset::load_clip, LabeledClip};
use entitydrag::{evalkit, pipeline, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Inputs are inconsistent (sizes, ids, empty masks).
    InvalidArgument = 2,
    Config = 3,
    /// Checkpoint or scene files are missing.
    NotReady = 4,
    Io = 5,
    /// Output buffer too small; the required size is reported.
    BufferTooSmall = 6,
    Fault = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> EdStatus {
    match e {
        Error::EmptyMask
        | Error::LengthMismatch { .. }
        | Error::MissingTrajectory(_)
        | Error::Spec(_)
        | Error::Undefined(_)
        | Error::Json(_) => EdStatus::InvalidArgument,
        Error::Config(_) => EdStatus::Config,
        Error::NotReady(_) => EdStatus::NotReady,
        Error::Io(_) | Error::Image(_) => EdStatus::Io,
        _ => EdStatus::Fault,
    }
}

struct Failure(EdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside entitydrag");
            EdStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(EdStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EdStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(null(what)) };
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Largest inscribed circle of a row-major `height x width` mask (nonzero
/// bytes are foreground). Center in pixel coordinates, `x` right, `y` down.
///
/// # Safety
/// `mask` must point to `height * width` bytes; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_incircle(
    mask: *const u8,
    height: usize,
    width: usize,
    out_x: *mut f64,
    out_y: *mut f64,
    out_radius: *mut f64,
) -> EdStatus {
    guard(|| {
        if out_x.is_null() || out_y.is_null() || out_radius.is_null() {
            return Err(null("output"));
        }
        let bytes = slice_arg(mask, height * width, "mask")?;
        let m = Mask::from_bits(height, width, bytes.iter().map(|&b| b != 0).collect())?;
        let c = geometry::incircle(&m)?;
        *out_x = c.center.x;
        *out_y = c.center.y;
        *out_radius = c.radius;
        Ok(())
    })
}

/// Mean distance between two `n`-point trajectories (`[x0, y0, x1, ...]`)
/// over frames whose `valid` byte is nonzero; `valid` may be null.
///
/// # Safety
/// `pred` and `gt` must hold `2 * n` doubles, `valid` (if non-null) `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn ed_objmc(pred: *const f64, gt: *const f64, valid: *const u8, n: usize, out: *mut f64) -> EdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let pts = |p: &[f64]| p.chunks_exact(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        let pred = pts(slice_arg(pred, 2 * n, "pred")?);
        let gt = pts(slice_arg(gt, 2 * n, "gt")?);
        let valid: Vec<bool> = if valid.is_null() {
            vec![true; n]
        } else {
            slice_arg(valid, n, "valid")?.iter().map(|&b| b != 0).collect()
        };
        *out = evalkit::objmc(&pred, &gt, &valid)?;
        Ok(())
    })
}

/// Resamples a polyline of `n_points` points to `n_out` points evenly spaced
/// by arc length, endpoints included.
///
/// # Safety
/// `points` must hold `2 * n_points` doubles and `out` room for `2 * n_out`.
#[no_mangle]
pub unsafe extern "C" fn ed_resample_polyline(points: *const f64, n_points: usize, n_out: usize, out: *mut f64) -> EdStatus {
    guard(|| {
        if out.is_null() && n_out > 0 {
            return Err(null("out"));
        }
        let pts: Vec<[f64; 2]> = slice_arg(points, 2 * n_points, "points")?
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let r = geometry::resample_polyline(&pts, n_out)?;
        let dst = std::slice::from_raw_parts_mut(out, 2 * n_out);
        for (d, p) in dst.chunks_exact_mut(2).zip(r) {
            d.copy_from_slice(&p);
        }
        Ok(())
    })
}

/// Loaded checkpoint.
pub struct EdModel {
    model: VideoModel,
}

/// Labeled clip used as a scene.
pub struct EdScene {
    clip: LabeledClip,
}

/// Loads a checkpoint directory. `use_ema` selects EMA weights when present.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_model_load(dir: *const c_char, use_ema: bool, out: *mut *mut EdModel) -> EdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = str_arg(dir, "dir")?;
        let model = pipeline::load_model(Path::new(dir), use_ema)?;
        *out = Box::into_raw(Box::new(EdModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ed_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ed_model_free(model: *mut EdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Clip shape the model generates: frames, height, width.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_model_shape(
    model: *const EdModel,
    out_frames: *mut usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> EdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_frames.is_null() || out_height.is_null() || out_width.is_null() {
            return Err(null("output"));
        }
        let c = m.model.config();
        *out_frames = c.frames;
        *out_height = c.height;
        *out_width = c.width;
        Ok(())
    })
}

/// Loads a clip `.safetensors` file (with its `.json` spec alongside).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_scene_load(path: *const c_char, out: *mut *mut EdScene) -> EdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let clip = load_clip(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(EdScene { clip }));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from [`ed_scene_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ed_scene_free(scene: *mut EdScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Ids of the entities visible in the first frame, ascending. Writes up
/// to `cap` ids and always stores the total count in `out_count`.
///
/// # Safety
/// `scene` must be a live handle; `ids` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ed_scene_entities(scene: *const EdScene, ids: *mut u32, cap: usize, out_count: *mut usize) -> EdStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        let mut found: Vec<u32> = s.clip.entities()?.iter().map(|e| e.id).collect();
        found.sort_unstable();
        *out_count = found.len();
        if found.len() > cap {
            return Err(Failure(EdStatus::BufferTooSmall, format!("need room for {} ids", found.len())));
        }
        if !found.is_empty() {
            if ids.is_null() {
                return Err(null("ids"));
            }
            std::slice::from_raw_parts_mut(ids, found.len()).copy_from_slice(&found);
        }
        Ok(())
    })
}

/// Generates a clip. `trajectories_json` is a JSON array of
/// `{"entity_id": u32, "points": [[x, y], ...]}`; drags with a point count
/// other than the clip length are resampled by arc length and entities
/// without a drag stay put. Writes `frames * height * width * 3` RGB bytes.
///
/// # Safety
/// Handles must be live, `trajectories_json` NUL-terminated and `out` must
/// have room for `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ed_generate(
    model: *const EdModel,
    scene: *const EdScene,
    trajectories_json: *const c_char,
    seed: u64,
    steps: usize,
    out: *mut u8,
    out_len: usize,
) -> EdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = scene.as_ref().ok_or_else(|| null("scene"))?;
        let drags: Vec<Trajectory> = serde_json::from_str(str_arg(trajectories_json, "trajectories_json")?)
            .map_err(|e| Failure(EdStatus::InvalidArgument, format!("malformed trajectories: {e}")))?;
        let c = m.model.config();
        let need = c.frames * c.height * c.width * 3;
        if out_len < need {
            return Err(Failure(EdStatus::BufferTooSmall, format!("need {need} bytes")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let full = pipeline::complete_trajectories(&s.clip, &drags)?;
        let video = pipeline::generate(&m.model, &s.clip, &full, ConditioningMode::Full, steps, seed)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(video.data());
        Ok(())
    })
}
