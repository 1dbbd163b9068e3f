//! C ABI over `alc-core`: build or load a detector, run it on RGB bytes, and
//! call a few standalone helpers.
//!
//! Every fallible call returns an [`AlcStatus`]; on failure the message is
//! available from [`alc_last_error_message`] on the same thread. Detectors are
//! opaque handles released with [`alc_detector_free`]. A handle may be used
//! from several threads at once for detection.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use alc_core::boxes::{iou, BBox};
use alc_core::checkpoint;
use alc_core::data::{class_name, NUM_CLASSES};
use alc_core::detector::{Detector, ModelConfig};
use alc_core::objective::atf_loss;
use alc_core::train::detect_image;
use alc_core::Error;
use image::RgbImage;

/// Status codes; the values match the `alc` command's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlcStatus {
    Ok = 0,
    /// Invalid configuration, argument or null pointer.
    ConfigError = 2,
    /// File, image, dataset or checkpoint failure.
    IoError = 3,
    /// Numerical failure or internal panic.
    RuntimeError = 4,
}

/// Opaque detector handle.
pub struct AlcDetector {
    inner: Detector<f32>,
}

/// Corner-form box in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlcBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlcDetection {
    pub bbox: AlcBox,
    pub confidence: f64,
    pub class_id: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(err: &Error) -> AlcStatus {
    set_error(err.to_string());
    match err.exit_code() {
        2 => AlcStatus::ConfigError,
        3 => AlcStatus::IoError,
        _ => AlcStatus::RuntimeError,
    }
}

fn bad_arg(msg: &str) -> AlcStatus {
    set_error(msg);
    AlcStatus::ConfigError
}

/// Runs `f`, turning a panic into [`AlcStatus::RuntimeError`].
fn guarded(f: impl FnOnce() -> AlcStatus) -> AlcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == AlcStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => {
            set_error("internal panic");
            AlcStatus::RuntimeError
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, AlcStatus> {
    if p.is_null() {
        return Err(bad_arg(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| bad_arg(&format!("{what} is not valid UTF-8")))
}

unsafe fn emit_handle(det: Detector<f32>, out: *mut *mut AlcDetector) -> AlcStatus {
    *out = Box::into_raw(Box::new(AlcDetector { inner: det }));
    AlcStatus::Ok
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn alc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a freshly initialized detector from a model-configuration JSON
/// object; `"{}"` gives the defaults.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alc_detector_new(config_json: *const c_char, out: *mut *mut AlcDetector) -> AlcStatus {
    guarded(|| {
        if out.is_null() {
            return bad_arg("out is null");
        }
        let text = match str_arg(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg: ModelConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return bad_arg(&format!("model config: {e}")),
        };
        match Detector::new(&cfg) {
            Ok(det) => emit_handle(det, out),
            Err(e) => fail(&e),
        }
    })
}

/// Loads a detector from a checkpoint file written by `alc train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alc_detector_load(path: *const c_char, out: *mut *mut AlcDetector) -> AlcStatus {
    guarded(|| {
        if out.is_null() {
            return bad_arg("out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::load(Path::new(path)) {
            Ok((det, _)) => emit_handle(det, out),
            Err(e) => fail(&e),
        }
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `det` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn alc_detector_free(det: *mut AlcDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Trainable parameter count, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alc_detector_num_parameters(det: *const AlcDetector) -> usize {
    det.as_ref().map_or(0, |d| d.inner.num_parameters())
}

/// Square model input size in pixels, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn alc_detector_input_size(det: *const AlcDetector) -> usize {
    det.as_ref().map_or(0, |d| d.inner.config().input_size)
}

/// Detects objects in a packed 8-bit RGB image of `width × height` pixels.
/// Boxes are in the image's own pixel coordinates, ordered by confidence.
/// Writes at most `capacity` detections to `out` and the total number found
/// to `out_count`, so a caller can retry with a larger buffer.
///
/// # Safety
/// `rgb` must hold `3 · width · height` bytes, `out` must hold `capacity`
/// entries (it may be null when `capacity` is 0), and `out_count` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn alc_detector_detect(
    det: *const AlcDetector,
    rgb: *const u8,
    width: u32,
    height: u32,
    conf_threshold: f64,
    nms_threshold: f64,
    out: *mut AlcDetection,
    capacity: usize,
    out_count: *mut usize,
) -> AlcStatus {
    guarded(|| {
        let Some(det) = det.as_ref() else {
            return bad_arg("detector is null");
        };
        if rgb.is_null() || out_count.is_null() || (out.is_null() && capacity > 0) {
            return bad_arg("null buffer");
        }
        if !(0.0..=1.0).contains(&conf_threshold) || !(0.0..=1.0).contains(&nms_threshold) {
            return bad_arg("thresholds must lie in [0, 1]");
        }
        let len = 3 * width as usize * height as usize;
        let bytes = std::slice::from_raw_parts(rgb, len).to_vec();
        let Some(img) = RgbImage::from_raw(width, height, bytes) else {
            return bad_arg("image dimensions do not match the buffer");
        };
        let found = match detect_image(&det.inner, &img, conf_threshold, nms_threshold) {
            Ok(f) => f,
            Err(e) => return fail(&e),
        };
        *out_count = found.len();
        for (i, d) in found.iter().take(capacity).enumerate() {
            let b = d.bbox;
            *out.add(i) = AlcDetection {
                bbox: AlcBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 },
                confidence: d.confidence,
                class_id: d.class_id as u32,
            };
        }
        AlcStatus::Ok
    })
}

/// Intersection over union of two boxes; 0 when the union is empty.
#[no_mangle]
pub extern "C" fn alc_iou(a: AlcBox, b: AlcBox) -> f64 {
    iou(&BBox::new(a.x1, a.y1, a.x2, a.y2), &BBox::new(b.x1, b.y1, b.x2, b.y2))
}

/// Adaptive-threshold focal loss of one probability `p` against `target`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn alc_atf_loss(p: f64, target: f64, gamma: f64, tau: f64, out: *mut f64) -> AlcStatus {
    guarded(|| {
        if out.is_null() {
            return bad_arg("out is null");
        }
        match atf_loss(p, target, gamma, tau) {
            Ok(v) => {
                *out = v;
                AlcStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of behaviour classes.
#[no_mangle]
pub extern "C" fn alc_num_classes() -> usize {
    NUM_CLASSES
}

static NAMES: [&CStr; NUM_CLASSES] = [
    c"sitting_listening",
    c"looking_down",
    c"looking_around",
    c"reading",
    c"writing",
    c"standing",
    c"hand_raising",
];

/// Static name of class `id`, or null when out of range.
#[no_mangle]
pub extern "C" fn alc_class_name(id: usize) -> *const c_char {
    match class_name(id) {
        Some(name) => {
            debug_assert_eq!(NAMES[id].to_str(), Ok(name));
            NAMES[id].as_ptr()
        }
        None => ptr::null(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alc_core::data::CLASS_NAMES;

    #[test]
    fn names_mirror_the_catalog() {
        for (i, n) in CLASS_NAMES.iter().enumerate() {
            assert_eq!(NAMES[i].to_str().unwrap(), *n);
        }
    }

    #[test]
    fn status_codes_are_stable() {
        let codes = [AlcStatus::Ok, AlcStatus::ConfigError, AlcStatus::IoError, AlcStatus::RuntimeError].map(|s| s as i32);
        assert_eq!(codes, [0, 2, 3, 4]);
    }
}
