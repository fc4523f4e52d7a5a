//! C ABI over the detection pipeline.
//!
//! Every object crosses the boundary as an opaque handle created by an
//! `ofg_*_new` / `ofg_*_load` call and released with the matching `_free`.
//! Functions return an [`OfgStatus`]; on failure the message is kept per
//! thread and read back with [`ofg_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ofgprn::detection::localize_scores;
use ofgprn::flow::{estimate_flow_with, motion_mask, suppress_background, FlowParams};
use ofgprn::fusion::{fuse_frames, FusionParams};
use ofgprn::grsan::ParamStore;
use ofgprn::image::{ImagePlane, RgbFrame};
use ofgprn::model::OfGprn;
use ofgprn::segmentation::preset;
use ofgprn::training::{prepare_sample, SamplePair, TrainConfig};
use ofgprn::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OfgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericalError = 4,
    Internal = 5,
}

/// A single-channel image with values in `[0, 1]`.
pub struct OfgImage(ImagePlane);

/// Three aligned colour planes.
pub struct OfgRgb(RgbFrame);

/// A trained network with the settings it was trained with.
pub struct OfgDetector {
    cfg: TrainConfig,
    model: OfGprn,
    store: ParamStore,
}

/// One detection in pixel coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OfgBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| {
        let mut v = msg.into_bytes();
        v.retain(|&b| b != 0);
        *e.borrow_mut() = v;
    });
}

fn status_of(err: &Error) -> OfgStatus {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Dimension(_) => OfgStatus::InvalidArgument,
        Error::NonFinite { .. } => OfgStatus::NumericalError,
        _ => OfgStatus::DataError,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OfgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OfgStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer for `{what}`"));
            OfgStatus::NullArgument
        }
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            OfgStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn c_str(p: *const c_char, what: &'static str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Core(Error::Config(format!("`{what}` is not valid UTF-8"))))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ofg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ofg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies `width * height` row-major values into a new, nonempty image.
///
/// # Safety
/// `data` must point to `width * height` readable doubles; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ofg_image_new(width: usize, height: usize, data: *const f64, out: *mut *mut OfgImage) -> OfgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = width.checked_mul(height).ok_or_else(|| Error::Config("image size overflows".into()))?;
        if n == 0 {
            return Err(Error::Config(format!("image {width}x{height} is empty")).into());
        }
        let values = slice(data, n, "data")?.to_vec();
        let plane = ImagePlane::new(width, height, values)?;
        *out = Box::into_raw(Box::new(OfgImage(plane)));
        Ok(())
    })
}

/// # Safety
/// `img` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ofg_image_free(img: *mut OfgImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Writes the image size.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ofg_image_size(img: *const OfgImage, width: *mut usize, height: *mut usize) -> OfgStatus {
    guard(|| {
        let img = deref(img, "img")?;
        *out_ptr(width, "width")? = img.0.width();
        *out_ptr(height, "height")? = img.0.height();
        Ok(())
    })
}

/// Copies the pixels into `buf`, which must hold `len >= width * height`
/// doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ofg_image_read(img: *const OfgImage, buf: *mut f64, len: usize) -> OfgStatus {
    guard(|| {
        let img = deref(img, "img")?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let data = img.0.data();
        if len < data.len() {
            return Err(Error::Config(format!("buffer holds {len} values, image has {}", data.len())).into());
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Builds a colour frame from three planes (copied).
///
/// # Safety
/// All pointers must be valid handles or out pointers.
#[no_mangle]
pub unsafe extern "C" fn ofg_rgb_new(r: *const OfgImage, g: *const OfgImage, b: *const OfgImage, out: *mut *mut OfgRgb) -> OfgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let frame = RgbFrame::new(deref(r, "r")?.0.clone(), deref(g, "g")?.0.clone(), deref(b, "b")?.0.clone())?;
        *out = Box::into_raw(Box::new(OfgRgb(frame)));
        Ok(())
    })
}

/// # Safety
/// `rgb` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ofg_rgb_free(rgb: *mut OfgRgb) {
    if !rgb.is_null() {
        drop(Box::from_raw(rgb));
    }
}

/// Fuses the luminance of `rgb` with `ir` using default settings.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ofg_fuse(rgb: *const OfgRgb, ir: *const OfgImage, out: *mut *mut OfgImage) -> OfgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let fused = fuse_frames(&deref(rgb, "rgb")?.0, &deref(ir, "ir")?.0, &FusionParams::default())?;
        *out = Box::into_raw(Box::new(OfgImage(fused)));
        Ok(())
    })
}

/// Estimates flow from `prev` to `next`, zeroes `next` outside the dilated
/// motion mask and reports how many pixels were kept.
///
/// # Safety
/// All pointers must be valid; `moving` may be null.
#[no_mangle]
pub unsafe extern "C" fn ofg_suppress_background(
    prev: *const OfgImage,
    next: *const OfgImage,
    threshold: f64,
    out: *mut *mut OfgImage,
    moving: *mut usize,
) -> OfgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if !(threshold >= 0.0) {
            return Err(Error::Config(format!("threshold must be nonnegative, got {threshold}")).into());
        }
        let next = &deref(next, "next")?.0;
        let flow = estimate_flow_with(&deref(prev, "prev")?.0, next, &FlowParams::default())?;
        let mask = motion_mask(&flow, threshold)?.dilate3x3();
        let kept = suppress_background(next, &mask)?;
        if let Some(m) = moving.as_mut() {
            *m = mask.count();
        }
        *out = Box::into_raw(Box::new(OfgImage(kept)));
        Ok(())
    })
}

/// Number of superpixels the named preset produces on `img`.
///
/// # Safety
/// All pointers must be valid; `preset_name` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ofg_segment_count(img: *const OfgImage, preset_name: *const c_char, count: *mut usize) -> OfgStatus {
    guard(|| {
        let count = out_ptr(count, "count")?;
        let seg = preset(&c_str(preset_name, "preset_name")?)?;
        *count = seg.segment(&deref(img, "img")?.0)?.segment_count();
        Ok(())
    })
}

/// Loads a checkpoint with the JSON training configuration written beside it.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ofg_detector_load(
    checkpoint_path: *const c_char,
    config_path: *const c_char,
    out: *mut *mut OfgDetector,
) -> OfgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = PathBuf::from(c_str(checkpoint_path, "checkpoint_path")?);
        let cp = PathBuf::from(c_str(config_path, "config_path")?);
        let text = std::fs::read_to_string(&cp).map_err(|e| Error::Data(format!("{}: {e}", cp.display())))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: cp.clone(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        let (model, mut store) = OfGprn::new(cfg.model_config(cfg.mode.node_feature_dim()), cfg.seed)?;
        store.load_values(&ck)?;
        *out = Box::into_raw(Box::new(OfgDetector { cfg, model, store }));
        Ok(())
    })
}

/// # Safety
/// `det` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ofg_detector_free(det: *mut OfgDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Runs the detector's preprocessing and network on one frame pair and its
/// predecessor, writing the best box.
///
/// # Safety
/// All pointers must be valid handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ofg_detect(
    det: *const OfgDetector,
    rgb: *const OfgRgb,
    ir: *const OfgImage,
    prev_rgb: *const OfgRgb,
    prev_ir: *const OfgImage,
    out: *mut OfgBox,
) -> OfgStatus {
    guard(|| {
        let det = deref(det, "det")?;
        let out = out_ptr(out, "out")?;
        let ir = deref(ir, "ir")?.0.clone();
        let (w, h) = (ir.width() as f64, ir.height() as f64);
        let pair = SamplePair {
            rgb: deref(rgb, "rgb")?.0.clone(),
            ir,
            prev_rgb: deref(prev_rgb, "prev_rgb")?.0.clone(),
            prev_ir: deref(prev_ir, "prev_ir")?.0.clone(),
            // the whole frame stands in for the unknown ground truth
            gt: ofgprn::detection::BBox::new(0.0, 0.0, w, h)?,
            frame_index: 0,
        };
        let sample = prepare_sample(&pair, &det.cfg, 0)?;
        let scores = det.model.predict(&det.store, &sample.input)?;
        let d = localize_scores(&scores[0], &sample.rag, det.cfg.expand_threshold, 0)?;
        *out = OfgBox {
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            score: d.score,
        };
        Ok(())
    })
}
