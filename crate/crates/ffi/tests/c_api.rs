//! The C ABI exercised through its Rust symbols.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use alc_core::checkpoint::{self, CheckpointMeta};
use alc_core::data::synthesize_scene;
use alc_core::detector::{Detector, ModelConfig};
use alc_core::objective::bce;
use alc_core::train::detect_image;
use alc_ffi::*;

fn last_error() -> String {
    let p = alc_last_error_message();
    assert!(!p.is_null(), "an error message is set");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_detector(json: &str) -> Result<*mut AlcDetector, AlcStatus> {
    let cfg = CString::new(json).unwrap();
    let mut det = ptr::null_mut();
    match unsafe { alc_detector_new(cfg.as_ptr(), &mut det) } {
        AlcStatus::Ok => Ok(det),
        s => Err(s),
    }
}

#[test]
fn construct_inspect_and_free() {
    let det = new_detector("{}").unwrap();
    unsafe {
        assert_eq!(alc_detector_input_size(det), 256);
        let n = alc_detector_num_parameters(det);
        assert_eq!(n, Detector::<f32>::new(&ModelConfig::default()).unwrap().num_parameters());
        alc_detector_free(det);
        alc_detector_free(ptr::null_mut());
        assert_eq!(alc_detector_num_parameters(ptr::null()), 0);
    }
}

#[test]
fn configuration_failures_report_code_2_and_a_message() {
    assert_eq!(new_detector("{\"input_size\": 100}").unwrap_err(), AlcStatus::ConfigError);
    assert!(last_error().contains("input_size"));
    assert_eq!(new_detector("{\"no_such_field\": 1}").unwrap_err(), AlcStatus::ConfigError);
    assert_eq!(new_detector("not json").unwrap_err(), AlcStatus::ConfigError);
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { alc_detector_new(ptr::null(), &mut det) }, AlcStatus::ConfigError);
    assert!(det.is_null());
    // A later success clears the message.
    let ok = new_detector("{}").unwrap();
    assert!(alc_last_error_message().is_null());
    unsafe { alc_detector_free(ok) };
}

#[test]
fn missing_and_corrupt_checkpoints_report_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut det = ptr::null_mut();
    let missing = CString::new(tmp.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { alc_detector_load(missing.as_ptr(), &mut det) }, AlcStatus::IoError);
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"garbage").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { alc_detector_load(bad.as_ptr(), &mut det) }, AlcStatus::IoError);
    assert!(last_error().contains("checkpoint"));
    assert!(det.is_null());
}

fn small_model() -> Detector<f32> {
    Detector::new(&ModelConfig { input_size: 64, seed: 3, ..ModelConfig::default() }).unwrap()
}

#[test]
fn detection_through_a_loaded_checkpoint_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ckpt");
    let model = small_model();
    checkpoint::save(&path, &model, &CheckpointMeta { step: 0, total_loss: None }).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { alc_detector_load(c_path.as_ptr(), &mut det) }, AlcStatus::Ok);

    let (img, _) = synthesize_scene(&Default::default(), 0).unwrap();
    let (w, h) = img.dimensions();
    let mut count = 0usize;
    // An untrained head sits at the 0.01 prior, so a low threshold yields boxes.
    let conf = 0.005;
    let status = unsafe { alc_detector_detect(det, img.as_raw().as_ptr(), w, h, conf, 0.7, ptr::null_mut(), 0, &mut count) };
    assert_eq!(status, AlcStatus::Ok);
    let want = detect_image(&model, &img, conf, 0.7).unwrap();
    assert_eq!(count, want.len());
    assert!(count > 0);

    let mut buf = vec![AlcDetection::default(); count + 3];
    let mut again = 0usize;
    let status =
        unsafe { alc_detector_detect(det, img.as_raw().as_ptr(), w, h, conf, 0.7, buf.as_mut_ptr(), buf.len(), &mut again) };
    assert_eq!((status, again), (AlcStatus::Ok, count));
    for (got, d) in buf.iter().zip(&want) {
        assert_eq!((got.class_id as usize, got.confidence), (d.class_id, d.confidence));
        assert_eq!((got.bbox.x1, got.bbox.y1, got.bbox.x2, got.bbox.y2), (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2));
        assert!(got.bbox.x1 >= 0.0 && got.bbox.x2 <= w as f64 && got.bbox.y2 <= h as f64);
    }
    assert!(buf[..count].windows(2).all(|p| p[0].confidence >= p[1].confidence));

    let mut two = [AlcDetection::default(); 2];
    unsafe { alc_detector_detect(det, img.as_raw().as_ptr(), w, h, conf, 0.7, two.as_mut_ptr(), 2, &mut again) };
    assert_eq!((again, two[1].confidence), (count, buf[1].confidence));
    unsafe { alc_detector_free(det) };
}

#[test]
fn detection_rejects_bad_arguments() {
    let det = new_detector("{\"input_size\": 64}").unwrap();
    let px = vec![0u8; 3 * 40 * 30];
    let mut count = 0;
    unsafe {
        let s = alc_detector_detect(det, px.as_ptr(), 40, 30, 1.5, 0.5, ptr::null_mut(), 0, &mut count);
        assert_eq!(s, AlcStatus::ConfigError);
        let s = alc_detector_detect(det, ptr::null(), 40, 30, 0.5, 0.5, ptr::null_mut(), 0, &mut count);
        assert_eq!(s, AlcStatus::ConfigError);
        let s = alc_detector_detect(det, px.as_ptr(), 40, 30, 0.5, 0.5, ptr::null_mut(), 4, &mut count);
        assert_eq!(s, AlcStatus::ConfigError);
        let s = alc_detector_detect(ptr::null(), px.as_ptr(), 40, 30, 0.5, 0.5, ptr::null_mut(), 0, &mut count);
        assert_eq!(s, AlcStatus::ConfigError);
        let s = alc_detector_detect(det, px.as_ptr(), 0, 30, 0.5, 0.5, ptr::null_mut(), 0, &mut count);
        assert_ne!(s, AlcStatus::Ok);
        alc_detector_free(det);
    }
}

#[test]
fn one_handle_serves_several_threads() {
    let det = new_detector("{\"input_size\": 64}").unwrap() as usize;
    let (img, _) = synthesize_scene(&Default::default(), 1).unwrap();
    let counts: Vec<usize> = std::thread::scope(|s| {
        let runs: Vec<_> = (0..3)
            .map(|_| {
                let img = &img;
                s.spawn(move || {
                    let mut n = 0;
                    let st = unsafe {
                        alc_detector_detect(det as *const AlcDetector, img.as_raw().as_ptr(), 256, 256, 0.005, 0.7, ptr::null_mut(), 0, &mut n)
                    };
                    assert_eq!(st, AlcStatus::Ok);
                    n
                })
            })
            .collect();
        runs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
    unsafe { alc_detector_free(det as *mut AlcDetector) };
}

#[test]
fn standalone_helpers() {
    let unit = AlcBox { x1: 0.0, y1: 0.0, x2: 2.0, y2: 2.0 };
    assert_eq!(alc_iou(unit, unit), 1.0);
    assert_eq!(alc_iou(unit, AlcBox { x1: 5.0, y1: 5.0, x2: 6.0, y2: 6.0 }), 0.0);
    let shifted = AlcBox { x1: 1.0, x2: 3.0, ..unit };
    assert!((alc_iou(unit, shifted) - 1.0 / 3.0).abs() < 1e-12);

    let mut v = 0.0;
    assert_eq!(unsafe { alc_atf_loss(0.3, 1.0, 0.0, 0.0, &mut v) }, AlcStatus::Ok);
    assert!((v - bce(0.3, 1.0)).abs() < 1e-12);
    assert_eq!(unsafe { alc_atf_loss(0.3, 1.0, 2.0, 0.25, ptr::null_mut()) }, AlcStatus::ConfigError);
    assert_ne!(unsafe { alc_atf_loss(f64::NAN, 1.0, 2.0, 0.25, &mut v) }, AlcStatus::Ok);

    assert_eq!(alc_num_classes(), 7);
    assert_eq!(unsafe { CStr::from_ptr(alc_class_name(6)) }.to_str(), Ok("hand_raising"));
    assert!(alc_class_name(7).is_null());
}

#[test]
fn generated_header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/alc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "ALC_STATUS_OK = 0",
        "ALC_STATUS_IO_ERROR = 3",
        "typedef struct AlcDetector AlcDetector;",
        "AlcStatus alc_detector_new(",
        "AlcStatus alc_detector_load(",
        "void alc_detector_free(",
        "AlcStatus alc_detector_detect(",
        "double alc_iou(",
        "AlcStatus alc_atf_loss(",
        "const char *alc_class_name(",
        "const char *alc_last_error_message(",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    // Parse the header as C when a compiler is available.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
