//! C ABI over the ratrack engine.
//!
//! Models and trackers are opaque heap handles created and destroyed through
//! this interface. Every fallible call returns a [`RatrackStatus`]; on failure
//! the message is available from [`ratrack_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ratrack::data::{load_model, save_model};
use ratrack::geometry::{intersection_rate, iou, BBox, FrameSize};
use ratrack::neural::RamDims;
use ratrack::ram::{RamKind, RamModel};
use ratrack::tracking::{track_step, Detection, TrackerConfig, TrackerState};
use ratrack::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatrackStatus {
    Ok = 0,
    InvalidArgument = 1,
    DimensionMismatch = 2,
    Io = 3,
    Parse = 4,
    Model = 5,
    Internal = 6,
    NullPointer = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatrackRamKind {
    Tram = 0,
    Sram = 1,
    Stram = 2,
}

impl From<RatrackRamKind> for RamKind {
    fn from(k: RatrackRamKind) -> Self {
        match k {
            RatrackRamKind::Tram => RamKind::Tram,
            RatrackRamKind::Sram => RamKind::Sram,
            RatrackRamKind::Stram => RamKind::Stram,
        }
    }
}

/// Box as `(left, top, width, height)` in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatrackBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<RatrackBox> for BBox {
    fn from(b: RatrackBox) -> Self {
        BBox::new(b.x, b.y, b.w, b.h)
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatrackDetection {
    pub bbox: RatrackBox,
    pub score: f64,
}

/// Tracker settings exposed to C. Start from
/// [`ratrack_tracker_options_default`] and adjust.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatrackTrackerOptions {
    pub frame_width: u32,
    pub frame_height: u32,
    pub tau_high: f64,
    pub tau_low: f64,
    pub stage1_alpha: f64,
    pub stage1_gate: f64,
    pub stage2_alpha: f64,
    pub stage2_gate: f64,
    pub lambda: f64,
    pub max_age: u32,
}

/// Opaque model handle.
pub struct RatrackModel {
    inner: RamModel,
}

/// Opaque tracker handle. Holds its own copy of the model.
pub struct RatrackTracker {
    state: TrackerState,
    config: TrackerConfig,
    model: Option<RamModel>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> RatrackStatus {
    match e {
        Error::Invalid { .. } => RatrackStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => RatrackStatus::DimensionMismatch,
        Error::Io { .. } => RatrackStatus::Io,
        Error::Parse { .. } => RatrackStatus::Parse,
        Error::Model { .. } => RatrackStatus::Model,
        Error::Invariant(_) => RatrackStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), RatrackStatus>) -> RatrackStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            RatrackStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_last_error("panic inside ratrack");
            RatrackStatus::Panic
        }
    }
}

fn fail(e: Error) -> RatrackStatus {
    set_last_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> RatrackStatus {
    set_last_error(format!("{what} is null"));
    RatrackStatus::NullPointer
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, RatrackStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_last_error("path is not valid UTF-8");
        RatrackStatus::InvalidArgument
    })
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into the library on the same
/// thread.
#[no_mangle]
pub extern "C" fn ratrack_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn ratrack_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn ratrack_iou(a: RatrackBox, b: RatrackBox) -> f64 {
    iou(&a.into(), &b.into())
}

/// Intersection area over the area of `mark`.
#[no_mangle]
pub extern "C" fn ratrack_intersection_rate(mark: RatrackBox, human: RatrackBox) -> f64 {
    intersection_rate(&mark.into(), &human.into())
}

/// Freshly initialized model for the given seed.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn ratrack_model_init(
    kind: RatrackRamKind,
    model_dim: usize,
    heads: usize,
    ffn_dim: usize,
    seed: u64,
    out: *mut *mut RatrackModel,
) -> RatrackStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dims = RamDims { input_dim: 4, model_dim, heads, ffn_dim };
        let inner = RamModel::init(kind.into(), dims, seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(RatrackModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ratrack_model_load(path: *const c_char, out: *mut *mut RatrackModel) -> RatrackStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let saved = load_model(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(RatrackModel { inner: saved.model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ratrack_model_save(model: *const RatrackModel, path: *const c_char, seed: u64) -> RatrackStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        save_model(path, &model.inner, seed, None).map_err(fail)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ratrack_model_free(model: *mut RatrackModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub extern "C" fn ratrack_tracker_options_default() -> RatrackTrackerOptions {
    let c = TrackerConfig::default();
    RatrackTrackerOptions {
        frame_width: c.frame.width,
        frame_height: c.frame.height,
        tau_high: c.tau_high,
        tau_low: c.tau_low,
        stage1_alpha: c.stage1.fusion.alpha_t,
        stage1_gate: c.stage1.min_affinity,
        stage2_alpha: c.stage2.fusion.alpha_t,
        stage2_gate: c.stage2.min_affinity,
        lambda: c.stage1.fusion.lambda,
        max_age: c.max_age as u32,
    }
}

fn tracker_config(o: &RatrackTrackerOptions) -> Result<TrackerConfig, Error> {
    let mut c = TrackerConfig {
        frame: FrameSize::new(o.frame_width, o.frame_height)?,
        tau_high: o.tau_high,
        tau_low: o.tau_low,
        max_age: o.max_age as usize,
        min_score_new_track: o.tau_high,
        ..TrackerConfig::default()
    };
    for (stage, alpha, gate) in [
        (&mut c.stage1, o.stage1_alpha, o.stage1_gate),
        (&mut c.stage2, o.stage2_alpha, o.stage2_gate),
    ] {
        stage.fusion.alpha_t = alpha;
        stage.fusion.alpha_s = alpha;
        stage.fusion.lambda = o.lambda;
        stage.min_affinity = gate;
    }
    c.validate()?;
    Ok(c)
}

/// New tracker. `model` may be null for plain IoU tracking; otherwise it is
/// copied and may be freed right after this call.
///
/// # Safety
/// `options` and `out` must be valid; `model` null or from this library.
#[no_mangle]
pub unsafe extern "C" fn ratrack_tracker_new(
    model: *const RatrackModel,
    options: *const RatrackTrackerOptions,
    out: *mut *mut RatrackTracker,
) -> RatrackStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let options = options.as_ref().ok_or_else(|| null("options"))?;
        let config = tracker_config(options).map_err(fail)?;
        let model = model.as_ref().map(|m| m.inner.clone());
        *out = Box::into_raw(Box::new(RatrackTracker { state: TrackerState::new(), config, model }));
        Ok(())
    })
}

/// Feeds one frame. Frames must increase. For each detection `i`,
/// `out_ids[i]` receives the track id it was assigned to, or 0 when it was
/// discarded.
///
/// # Safety
/// `detections` and `out_ids` must each point to `count` elements (they may
/// be null when `count` is 0).
#[no_mangle]
pub unsafe extern "C" fn ratrack_tracker_step(
    tracker: *mut RatrackTracker,
    frame: usize,
    detections: *const RatrackDetection,
    count: usize,
    out_ids: *mut u64,
) -> RatrackStatus {
    guard(|| {
        let t = tracker.as_mut().ok_or_else(|| null("tracker"))?;
        if count > 0 && (detections.is_null() || out_ids.is_null()) {
            return Err(null("detections or out_ids"));
        }
        let raw = if count == 0 { &[][..] } else { std::slice::from_raw_parts(detections, count) };
        let dets = raw
            .iter()
            .map(|d| Detection::new(frame, d.bbox.into(), d.score))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fail)?;
        let assignment = track_step(&mut t.state, frame, &dets, &t.config, t.model.as_ref()).map_err(fail)?;
        if count > 0 {
            let ids = std::slice::from_raw_parts_mut(out_ids, count);
            ids.fill(0);
            for (id, di) in assignment {
                ids[di] = id;
            }
        }
        Ok(())
    })
}

/// Number of live (not yet retired) tracks, or 0 for a null handle.
///
/// # Safety
/// `tracker` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn ratrack_tracker_active_count(tracker: *const RatrackTracker) -> usize {
    tracker.as_ref().map_or(0, |t| t.state.tracks.len())
}

/// # Safety
/// `tracker` must come from this library and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ratrack_tracker_free(tracker: *mut RatrackTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}
