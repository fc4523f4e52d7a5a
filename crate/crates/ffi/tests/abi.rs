use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use ofgprn::fusion::{fuse_frames, FusionParams};
use ofgprn::image::ImagePlane;
use ofgprn::training::{run_training, synth_dataset, PipelineMode, TrainConfig};
use ofgprn_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { ofg_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn image(plane: &ImagePlane) -> *mut OfgImage {
    let mut out = ptr::null_mut();
    let st = unsafe { ofg_image_new(plane.width(), plane.height(), plane.data().as_ptr(), &mut out) };
    assert_eq!(st, OfgStatus::Ok);
    out
}

fn read(img: *const OfgImage) -> ImagePlane {
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { ofg_image_size(img, &mut w, &mut h) }, OfgStatus::Ok);
    let mut buf = vec![0.0; w * h];
    assert_eq!(unsafe { ofg_image_read(img, buf.as_mut_ptr(), buf.len()) }, OfgStatus::Ok);
    ImagePlane::new(w, h, buf).unwrap()
}

fn rgb(frame: &ofgprn::image::RgbFrame) -> *mut OfgRgb {
    let planes = [image(&frame.r), image(&frame.g), image(&frame.b)];
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ofg_rgb_new(planes[0], planes[1], planes[2], &mut out) }, OfgStatus::Ok);
    for p in planes {
        unsafe { ofg_image_free(p) };
    }
    out
}

#[test]
fn image_round_trip() {
    let plane = ImagePlane::from_fn(7, 5, |x, y| (x * 5 + y) as f64 / 40.0);
    let img = image(&plane);
    assert_eq!(read(img), plane);
    let mut small = [0.0; 3];
    assert_eq!(unsafe { ofg_image_read(img, small.as_mut_ptr(), 3) }, OfgStatus::InvalidArgument);
    unsafe { ofg_image_free(img) };
    unsafe { ofg_image_free(ptr::null_mut()) };
}

#[test]
fn null_and_invalid_arguments() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ofg_image_new(2, 2, ptr::null(), &mut out) }, OfgStatus::NullArgument);
    assert!(last_error().contains("data"));
    assert!(out.is_null());
    let data = [0.5; 4];
    assert_eq!(unsafe { ofg_image_new(2, 2, data.as_ptr(), ptr::null_mut()) }, OfgStatus::NullArgument);
    assert_eq!(unsafe { ofg_image_new(0, 2, data.as_ptr(), &mut out) }, OfgStatus::InvalidArgument);
    assert_eq!(unsafe { ofg_fuse(ptr::null(), ptr::null(), &mut out) }, OfgStatus::NullArgument);

    let img = image(&ImagePlane::constant(8, 8, 0.5));
    let mut count = 0;
    let name = CString::new("no-such-preset").unwrap();
    assert_eq!(unsafe { ofg_segment_count(img, name.as_ptr(), &mut count) }, OfgStatus::InvalidArgument);
    assert!(last_error().contains("no-such-preset"));
    assert_eq!(unsafe { ofg_suppress_background(img, img, -1.0, &mut out, ptr::null_mut()) }, OfgStatus::InvalidArgument);
    unsafe { ofg_image_free(img) };

    let (ck, cfg) = (CString::new("/nonexistent/a.ckpt").unwrap(), CString::new("/nonexistent/c.json").unwrap());
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { ofg_detector_load(ck.as_ptr(), cfg.as_ptr(), &mut det) }, OfgStatus::DataError);
    assert!(det.is_null());
}

#[test]
fn error_message_is_truncated_and_terminated() {
    let mut out = ptr::null_mut();
    unsafe { ofg_image_new(2, 2, ptr::null(), &mut out) };
    let full = last_error();
    let mut buf = [1 as std::ffi::c_char; 5];
    let n = unsafe { ofg_last_error(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full.len());
    assert_eq!(buf[4], 0);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), &full[..4]);
}

#[test]
fn calls_agree_with_the_library() {
    let pair = &synth_dataset(5, 1, 48, 40, (3, 5), (2.0, 3.0)).unwrap()[0];
    let (frame, ir) = (rgb(&pair.rgb), image(&pair.ir));
    let mut fused = ptr::null_mut();
    assert_eq!(unsafe { ofg_fuse(frame, ir, &mut fused) }, OfgStatus::Ok);
    assert_eq!(read(fused), fuse_frames(&pair.rgb, &pair.ir, &FusionParams::default()).unwrap());

    let prev_ir = image(&pair.prev_ir);
    let (mut kept, mut moving) = (ptr::null_mut(), 0);
    assert_eq!(unsafe { ofg_suppress_background(prev_ir, ir, 0.5, &mut kept, &mut moving) }, OfgStatus::Ok);
    let zeros = read(kept).data().iter().filter(|&&v| v == 0.0).count();
    assert!(moving > 0 && zeros >= 48 * 40 - moving);

    let mut count = 0;
    let name = CString::new("paper").unwrap();
    assert_eq!(unsafe { ofg_segment_count(fused, name.as_ptr(), &mut count) }, OfgStatus::Ok);
    assert!(count >= 1);
    for p in [fused, kept, prev_ir, ir] {
        unsafe { ofg_image_free(p) };
    }
    unsafe { ofg_rgb_free(frame) };
}

#[test]
fn detector_loads_a_checkpoint_and_detects() {
    let data = synth_dataset(1, 8, 32, 32, (3, 5), (2.0, 3.0)).unwrap();
    let cfg = TrainConfig {
        mode: PipelineMode::FusionFlow,
        epochs: 2,
        widths: Some(vec![8; 5]),
        pyramid_width: Some(8),
        ..TrainConfig::default()
    };
    let trained = run_training(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ck, cj) = (dir.path().join("final.ckpt"), dir.path().join("config.json"));
    std::fs::write(&ck, &trained.final_checkpoint).unwrap();
    std::fs::write(&cj, serde_json::to_string(&cfg).unwrap()).unwrap();

    let (ckc, cjc) = (CString::new(ck.to_str().unwrap()).unwrap(), CString::new(cj.to_str().unwrap()).unwrap());
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { ofg_detector_load(ckc.as_ptr(), cjc.as_ptr(), &mut det) }, OfgStatus::Ok);

    let p = &data[0];
    let (r, i, pr, pi) = (rgb(&p.rgb), image(&p.ir), rgb(&p.prev_rgb), image(&p.prev_ir));
    let mut b = OfgBox { x_min: 0.0, y_min: 0.0, x_max: 0.0, y_max: 0.0, score: -1.0 };
    assert_eq!(unsafe { ofg_detect(det, r, i, pr, pi, &mut b) }, OfgStatus::Ok);
    assert!(b.x_min < b.x_max && b.y_min < b.y_max && b.x_max <= 32.0 && b.y_max <= 32.0);
    assert!((0.0..=1.0).contains(&b.score));
    assert_eq!(unsafe { ofg_detect(ptr::null(), r, i, pr, pi, &mut b) }, OfgStatus::NullArgument);

    // A checkpoint for other widths is refused.
    let other = TrainConfig { widths: Some(vec![4; 5]), ..cfg };
    std::fs::write(&cj, serde_json::to_string(&other).unwrap()).unwrap();
    let mut wrong = ptr::null_mut();
    assert_ne!(unsafe { ofg_detector_load(ckc.as_ptr(), cjc.as_ptr(), &mut wrong) }, OfgStatus::Ok);
    assert!(wrong.is_null());

    unsafe {
        ofg_detector_free(det);
        ofg_rgb_free(r);
        ofg_rgb_free(pr);
        ofg_image_free(i);
        ofg_image_free(pi);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(ofg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/ofgprn.h");
    let text = std::fs::read_to_string(header).unwrap();
    let src = include_str!("../src/lib.rs");
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).status() else {
        return;
    };
    assert!(status.success());
}
