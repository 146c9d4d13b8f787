//! C ABI over a trained checkpoint: load, classify, extract and manipulate
//! style vectors, classify captions.
//!
//! Every function returns a [`StsStatus`]. On failure the message is kept
//! per thread and can be read with [`sts_last_error_message`]. Frames are
//! passed row-major as `bins × frames` doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stylespace::inference::{self, StyleVector};
use stylespace::{Checkpoint, Error, Model, Tensor};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StsStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Parse = 3,
    InvalidArgument = 4,
    Uninitialized = 5,
    BufferTooSmall = 6,
    Numeric = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct StsModel {
    model: Model,
}

/// Result of one style manipulation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StsManipulation {
    pub source_class: usize,
    pub target_class: usize,
    pub orig_sim: f64,
    pub manip_sim: f64,
    /// 1 when the manipulated slice classifies as the target.
    pub reclass_hit: i32,
    /// 1 when no other task's prediction changed.
    pub other_tasks_stable: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StsStatus {
    match e {
        Error::Io { .. } => StsStatus::Io,
        Error::Json { .. } | Error::Parse { .. } | Error::Schema { .. } | Error::Version { .. } | Error::Csv(_) => {
            StsStatus::Parse
        }
        Error::UninitializedPrototype { .. } => StsStatus::Uninitialized,
        Error::NonFinite { .. } | Error::Backward(_) => StsStatus::Numeric,
        _ => StsStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (StsStatus, String)>) -> StsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside stylespace".into());
            StsStatus::Panic
        }
    }
}

type Outcome<T> = Result<T, (StsStatus, String)>;

fn lib<T>(r: stylespace::Result<T>) -> Outcome<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (StsStatus, String) {
    (StsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const StsModel) -> Outcome<&'a Model> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

unsafe fn frames_from(model: &Model, data: *const f64, bins: usize, frames: usize) -> Outcome<Tensor> {
    if data.is_null() {
        return Err(null("frames"));
    }
    if bins != model.encoder.shape.bins {
        return Err((
            StsStatus::InvalidArgument,
            format!("model expects {} bins, got {bins}", model.encoder.shape.bins),
        ));
    }
    let n = bins.checked_mul(frames).filter(|&n| n > 0).ok_or((
        StsStatus::InvalidArgument,
        "frame count must be positive".to_string(),
    ))?;
    let values = std::slice::from_raw_parts(data, n).to_vec();
    lib(Tensor::new(bins, frames, values))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, need: usize, what: &str) -> Outcome<&'a mut [T]> {
    if ptr.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err((
            StsStatus::BufferTooSmall,
            format!("{what} holds {len} values, need {need}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, need))
}

unsafe fn write_out<T>(ptr: *mut T, value: T, what: &str) -> Outcome<()> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a handle to release
/// with [`sts_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sts_model_load(path: *const c_char, out: *mut *mut StsModel) -> StsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (StsStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = lib(Checkpoint::load(Path::new(path)).and_then(|c| c.model()))?;
        out.write(Box::into_raw(Box::new(StsModel { model })));
        Ok(())
    })
}

/// Releases a handle from [`sts_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from `sts_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sts_model_free(model: *mut StsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sts_model_num_tasks(model: *const StsModel, out: *mut usize) -> StsStatus {
    guard(|| write_out(out, model_ref(model)?.schema.num_tasks(), "out"))
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sts_model_num_classes(model: *const StsModel, task: usize, out: *mut usize) -> StsStatus {
    guard(|| {
        let m = model_ref(model)?;
        if task >= m.schema.num_tasks() {
            return Err((StsStatus::InvalidArgument, format!("task {task} out of range")));
        }
        write_out(out, m.schema.num_classes(task), "out")
    })
}

/// Width of one task slice of the style vector.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sts_model_task_dim(model: *const StsModel, out: *mut usize) -> StsStatus {
    guard(|| write_out(out, model_ref(model)?.task_dim(), "out"))
}

/// Frequency bins the encoder expects.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sts_model_bins(model: *const StsModel, out: *mut usize) -> StsStatus {
    guard(|| write_out(out, model_ref(model)?.encoder.shape.bins, "out"))
}

/// Per-task nearest-prototype class and cosine score. Both output arrays
/// need room for one entry per task.
///
/// # Safety
/// `frames` must hold `bins * n_frames` doubles; outputs must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn sts_classify(
    model: *const StsModel,
    frames: *const f64,
    bins: usize,
    n_frames: usize,
    out_classes: *mut usize,
    out_scores: *mut f64,
    len: usize,
) -> StsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = frames_from(m, frames, bins, n_frames)?;
        let t = m.schema.num_tasks();
        let classes = out_slice(out_classes, len, t, "out_classes")?;
        let scores = out_slice(out_scores, len, t, "out_scores")?;
        for (k, p) in lib(inference::classify(m, &x))?.into_iter().enumerate() {
            classes[k] = p.class;
            scores[k] = p.score;
        }
        Ok(())
    })
}

/// Writes the concatenated style vector (tasks × task_dim doubles).
///
/// # Safety
/// `frames` must hold `bins * n_frames` doubles; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sts_extract_style(
    model: *const StsModel,
    frames: *const f64,
    bins: usize,
    n_frames: usize,
    out: *mut f64,
    len: usize,
) -> StsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = frames_from(m, frames, bins, n_frames)?;
        let style = lib(inference::extract_style(m, &x))?;
        out_slice(out, len, style.concat().len(), "out")?.copy_from_slice(style.concat());
        Ok(())
    })
}

/// Moves one task slice toward the target prototype with strength `alpha`
/// in [0, 1] and writes the new style vector and a report.
///
/// # Safety
/// `frames` must hold `bins * n_frames` doubles; `out_style` must hold
/// `len` doubles; `report` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn sts_manipulate(
    model: *const StsModel,
    frames: *const f64,
    bins: usize,
    n_frames: usize,
    task: usize,
    target_class: usize,
    alpha: f64,
    out_style: *mut f64,
    len: usize,
    report: *mut StsManipulation,
) -> StsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = frames_from(m, frames, bins, n_frames)?;
        let (style, r): (StyleVector, _) = lib(inference::manipulate(m, &x, task, target_class, alpha))?;
        out_slice(out_style, len, style.concat().len(), "out_style")?.copy_from_slice(style.concat());
        if !report.is_null() {
            report.write(StsManipulation {
                source_class: r.source_class,
                target_class: r.target_class,
                orig_sim: r.orig_sim,
                manip_sim: r.manip_sim,
                reclass_hit: r.reclass_hit as i32,
                other_tasks_stable: r.other_tasks_stable as i32,
            });
        }
        Ok(())
    })
}

/// Classifies a caption per task. Tasks the caption does not name get
/// class -1 and score NaN.
///
/// # Safety
/// `caption` must be NUL-terminated; outputs must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn sts_classify_caption(
    model: *const StsModel,
    caption: *const c_char,
    out_classes: *mut i64,
    out_scores: *mut f64,
    len: usize,
) -> StsStatus {
    guard(|| {
        let m = model_ref(model)?;
        if caption.is_null() {
            return Err(null("caption"));
        }
        let text = CStr::from_ptr(caption)
            .to_str()
            .map_err(|_| (StsStatus::InvalidArgument, "caption is not UTF-8".to_string()))?;
        let t = m.schema.num_tasks();
        let classes = out_slice(out_classes, len, t, "out_classes")?;
        let scores = out_slice(out_scores, len, t, "out_scores")?;
        for (k, p) in lib(inference::classify_caption(m, text))?.into_iter().enumerate() {
            (classes[k], scores[k]) = match p {
                Some(p) => (p.class as i64, p.score),
                None => (-1, f64::NAN),
            };
        }
        Ok(())
    })
}
