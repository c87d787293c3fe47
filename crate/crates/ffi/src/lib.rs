//! C ABI over the tracker runtime.
//!
//! Handles are opaque pointers. Every fallible call returns a [`TtStatus`];
//! on failure the message is kept per thread and read back with
//! [`tt_last_error_message`]. Frames are passed as tightly packed 8-bit
//! rows: interleaved RGB for the colour stream, one channel for the
//! auxiliary stream.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use tokentrack::checkpoint::Checkpoint;
use tokentrack::data::SequenceFrame;
use tokentrack::eval::evaluate_sequence;
use tokentrack::tracker::{Tracker, TrackerOptions};
use tokentrack::{BoundingBox, Error, Image, Model, Task};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Data = 6,
    Model = 7,
    Track = 8,
    Eval = 9,
    Numeric = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TtMode {
    Rgb = 0,
    Rgbd = 1,
    Rgbt = 2,
    Rgbe = 3,
}

impl From<TtMode> for Task {
    fn from(m: TtMode) -> Self {
        match m {
            TtMode::Rgb => Task::Rgb,
            TtMode::Rgbd => Task::Rgbd,
            TtMode::Rgbt => Task::Rgbt,
            TtMode::Rgbe => Task::Rgbe,
        }
    }
}

/// Axis-aligned box in pixels, top-left corner plus size.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TtBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl From<TtBox> for BoundingBox {
    fn from(b: TtBox) -> Self {
        BoundingBox::from_xywh(b.x, b.y, b.width, b.height)
    }
}

impl From<BoundingBox> for TtBox {
    fn from(b: BoundingBox) -> Self {
        let [x, y, width, height] = b.to_xywh();
        TtBox { x, y, width, height }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TtTrackerOptions {
    pub mode: TtMode,
    pub token_propagation: bool,
    pub cosine_window: bool,
    pub memory_capacity: usize,
    /// Run the forward pass in f64 instead of f32.
    pub double_precision: bool,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TtMetrics {
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
}

/// Loaded parameters; shareable by any number of trackers.
pub struct TtModel {
    model: Arc<Model>,
}

enum Engine {
    Single(Tracker<'static, f32>),
    Double(Tracker<'static, f64>),
}

/// One tracking session.
pub struct TtTracker {
    // declared first so it drops before the model it borrows
    engine: Engine,
    _model: Arc<Model>,
    task: Task,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TtStatus {
    match e {
        Error::Io(_) => TtStatus::Io,
        Error::Checkpoint(_) => TtStatus::Checkpoint,
        Error::Config(_) => TtStatus::Config,
        Error::Data(_) => TtStatus::Data,
        Error::Model(_) => TtStatus::Model,
        Error::Track(_) => TtStatus::Track,
        Error::Eval(_) => TtStatus::Eval,
        Error::Tensor(_) => TtStatus::Numeric,
        _ => TtStatus::Model,
    }
}

struct Fail(TtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.kind()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TtStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside tokentrack".into());
            TtStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(TtStatus::InvalidArgument, msg.into())
}

unsafe fn frame_from_raw(
    rgb: *const u8,
    aux: *const u8,
    width: usize,
    height: usize,
    task: Task,
) -> Result<SequenceFrame, Fail> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    if width == 0 || height == 0 {
        return Err(invalid("frame must be non-empty"));
    }
    let n = width.checked_mul(height).ok_or_else(|| invalid("frame too large"))?;
    let packed = std::slice::from_raw_parts(rgb, n * 3);
    let mut image = Image::new(3, height, width);
    for (i, px) in packed.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            image.data[c * n + i] = v;
        }
    }
    let aux = match (task.is_dual(), aux.is_null()) {
        (false, _) => None,
        (true, true) => return Err(null(&format!("aux (mode {task} needs an auxiliary frame)"))),
        (true, false) => {
            let mut a = Image::new(1, height, width);
            a.data.copy_from_slice(std::slice::from_raw_parts(aux, n));
            Some(a)
        }
    };
    Ok(SequenceFrame { rgb: image, aux })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tt_model_load(path: *const c_char, out: *mut *mut TtModel) -> TtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = Model::from_checkpoint(&Checkpoint::load(Path::new(path))?)?;
        *out = Box::into_raw(Box::new(TtModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// Freshly initialized (untrained) model with the default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tt_model_new_default(out: *mut *mut TtModel) -> TtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Model::new(tokentrack::ModelConfig::default())?;
        *out = Box::into_raw(Box::new(TtModel { model: Arc::new(model) }));
        Ok(())
    })
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tt_model_param_count(model: *const TtModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.store.scalar_count())
}

/// # Safety
/// `model` must be null or a handle not yet freed. Trackers created from it
/// stay valid.
#[no_mangle]
pub unsafe extern "C" fn tt_model_free(model: *mut TtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Defaults: rgb mode, propagation on, no window, memory 16, f32.
#[no_mangle]
pub extern "C" fn tt_tracker_options_default() -> TtTrackerOptions {
    let d = TrackerOptions::default();
    TtTrackerOptions {
        mode: TtMode::Rgb,
        token_propagation: d.token_propagation,
        cosine_window: d.cosine_window,
        memory_capacity: d.memory_capacity,
        double_precision: false,
    }
}

/// # Safety
/// `model` must be a live handle, `options` readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tt_tracker_new(
    model: *const TtModel,
    options: *const TtTrackerOptions,
    out: *mut *mut TtTracker,
) -> TtStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let o = *options.as_ref().ok_or_else(|| null("options"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if o.memory_capacity == 0 {
            return Err(invalid("memory_capacity must be at least 1"));
        }
        let arc = Arc::clone(&model.model);
        // The Arc keeps the model at a fixed address for as long as the
        // tracker lives, and the tracker is dropped first.
        let shared: &'static Model = &*Arc::as_ptr(&arc);
        let task = Task::from(o.mode);
        let opts = TrackerOptions {
            memory_capacity: o.memory_capacity,
            token_propagation: o.token_propagation,
            cosine_window: o.cosine_window,
        };
        let engine = if o.double_precision {
            Engine::Double(Tracker::new(shared, task, opts)?)
        } else {
            Engine::Single(Tracker::new(shared, task, opts)?)
        };
        *out = Box::into_raw(Box::new(TtTracker {
            engine,
            _model: arc,
            task,
        }));
        Ok(())
    })
}

/// Start a track on the first frame. `aux` may be null in rgb mode.
///
/// # Safety
/// `tracker` must be a live handle; `rgb` must hold `width*height*3` bytes and
/// `aux` (when non-null) `width*height` bytes.
#[no_mangle]
pub unsafe extern "C" fn tt_tracker_init(
    tracker: *mut TtTracker,
    rgb: *const u8,
    aux: *const u8,
    width: usize,
    height: usize,
    init_box: TtBox,
) -> TtStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        let frame = frame_from_raw(rgb, aux, width, height, t.task)?;
        let a = t.task.aux();
        match &mut t.engine {
            Engine::Single(tr) => tr.init(&frame, a, init_box.into())?,
            Engine::Double(tr) => tr.init(&frame, a, init_box.into())?,
        }
        Ok(())
    })
}

/// Track one frame. Writes the box and its confidence in [0, 1].
///
/// # Safety
/// As [`tt_tracker_init`]; `out_box` and `out_score` must be writable (either
/// may be null to skip it).
#[no_mangle]
pub unsafe extern "C" fn tt_tracker_step(
    tracker: *mut TtTracker,
    rgb: *const u8,
    aux: *const u8,
    width: usize,
    height: usize,
    out_box: *mut TtBox,
    out_score: *mut f64,
) -> TtStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        let frame = frame_from_raw(rgb, aux, width, height, t.task)?;
        let a = t.task.aux();
        let (b, s) = match &mut t.engine {
            Engine::Single(tr) => {
                let r = tr.step(&frame, a)?;
                (r.bbox, r.score)
            }
            Engine::Double(tr) => {
                let r = tr.step(&frame, a)?;
                (r.bbox, r.score)
            }
        };
        if !out_box.is_null() {
            *out_box = b.into();
        }
        if !out_score.is_null() {
            *out_score = s;
        }
        Ok(())
    })
}

/// # Safety
/// `tracker` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tt_tracker_free(tracker: *mut TtTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// One-pass metrics of `n` predicted boxes against ground truth.
///
/// # Safety
/// `pred` and `gt` must hold `n` boxes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tt_evaluate(pred: *const TtBox, gt: *const TtBox, n: usize, out: *mut TtMetrics) -> TtStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("pred, gt or out"));
        }
        let p: Vec<BoundingBox> = std::slice::from_raw_parts(pred, n).iter().map(|&b| b.into()).collect();
        let g: Vec<BoundingBox> = std::slice::from_raw_parts(gt, n).iter().map(|&b| b.into()).collect();
        let e = evaluate_sequence("ffi", &p, &g)?;
        *out = TtMetrics {
            auc: e.auc,
            precision: e.precision,
            norm_precision: e.norm_precision,
            mean_iou: e.mean_iou,
        };
        Ok(())
    })
}
