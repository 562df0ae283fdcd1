use std::ffi::{CStr, CString};
use std::ptr;

use kpbe::pipeline::toy::{synthesize_toy_dataset, talking_clip};
use kpbe::training::Checkpoint;
use kpbe_ffi::*;

fn last_error() -> String {
    let p = kpbe_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn toy_frames(n: usize) -> Vec<Vec<u8>> {
    synthesize_toy_dataset(&talking_clip(4, n, 0.3, 64))
        .unwrap()
        .frames
        .frames()
        .iter()
        .map(|f| f.to_rgb8())
        .collect()
}

fn new_model(seed: u64) -> *mut KpbeModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { kpbe_model_new(seed, &mut m) }, KpbeStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(kpbe_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn enhance_a_frame_through_handles() {
    let model = new_model(11);
    assert_eq!(unsafe { kpbe_model_resolution(model) }, 64);
    let frames = toy_frames(2);
    let mut source = ptr::null_mut();
    let st = unsafe { kpbe_source_new(model, frames[0].as_ptr(), 64, 64, &mut source) };
    assert_eq!(st, KpbeStatus::Ok);
    assert!(kpbe_last_error_message().is_null());

    let mut out = vec![0u8; 64 * 64 * 3];
    let st = unsafe {
        kpbe_enhance_frame(source, frames[1].as_ptr(), frames[1].as_ptr(), 64, 64, out.as_mut_ptr(), out.len())
    };
    assert_eq!(st, KpbeStatus::Ok);
    let mut again = vec![0u8; out.len()];
    unsafe {
        kpbe_enhance_frame(source, frames[1].as_ptr(), frames[1].as_ptr(), 64, 64, again.as_mut_ptr(), again.len())
    };
    assert_eq!(out, again);

    let mut short = vec![0u8; 10];
    let st = unsafe {
        kpbe_enhance_frame(source, frames[1].as_ptr(), frames[1].as_ptr(), 64, 64, short.as_mut_ptr(), short.len())
    };
    assert_eq!(st, KpbeStatus::BufferTooSmall);
    assert!(last_error().contains("12288"));

    unsafe {
        kpbe_source_free(source);
        kpbe_model_free(model);
    }
}

#[test]
fn non_orthonormal_rotation_is_reported() {
    let model = new_model(2);
    let frames = toy_frames(1);
    let mut source = ptr::null_mut();
    unsafe { kpbe_source_new(model, frames[0].as_ptr(), 64, 64, &mut source) };
    let rotation = [1.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let mut out = vec![0u8; 64 * 64 * 3];
    let st = unsafe {
        kpbe_reenact_frame(
            source,
            frames[0].as_ptr(),
            64,
            64,
            rotation.as_ptr(),
            [0.0; 3].as_ptr(),
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, KpbeStatus::InvalidRotation);
    assert!(last_error().contains("rotation"));

    let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let st = unsafe {
        kpbe_reenact_frame(
            source,
            frames[0].as_ptr(),
            64,
            64,
            identity.as_ptr(),
            [0.0, 0.1, 0.0].as_ptr(),
            out.as_mut_ptr(),
            out.len(),
        )
    };
    assert_eq!(st, KpbeStatus::Ok);
    unsafe {
        kpbe_source_free(source);
        kpbe_model_free(model);
    }
}

#[test]
fn null_arguments_and_missing_files_are_status_codes() {
    assert_eq!(unsafe { kpbe_model_new(0, ptr::null_mut()) }, KpbeStatus::NullPointer);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { kpbe_model_load(ptr::null(), &mut m) }, KpbeStatus::NullPointer);
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { kpbe_model_load(missing.as_ptr(), &mut m) }, KpbeStatus::Checkpoint);
    assert!(m.is_null());
    assert_eq!(unsafe { kpbe_model_resolution(ptr::null()) }, 0);
    unsafe {
        kpbe_model_free(ptr::null_mut());
        kpbe_source_free(ptr::null_mut());
    }
}

#[test]
fn load_a_saved_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = kpbe::model::Kpbe::new(Default::default(), 5).unwrap();
    let trainer = kpbe::training::Trainer::new(model, Default::default()).unwrap();
    trainer.checkpoint().save(&path).unwrap();
    assert!(Checkpoint::load(&path).is_ok());

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { kpbe_model_load(c.as_ptr(), &mut m) }, KpbeStatus::Ok);
    unsafe { kpbe_model_free(m) };

    std::fs::write(&path, b"garbage").unwrap();
    assert_eq!(unsafe { kpbe_model_load(c.as_ptr(), &mut m) }, KpbeStatus::Checkpoint);
}

#[test]
fn metrics_over_the_boundary() {
    let a = vec![0u8; 16 * 16 * 3];
    let b = vec![255u8; 16 * 16 * 3];
    let (mut db, mut identical) = (f64::NAN, -1);
    assert_eq!(unsafe { kpbe_psnr(a.as_ptr(), b.as_ptr(), 16, 16, &mut db, &mut identical) }, KpbeStatus::Ok);
    assert_eq!((db, identical), (0.0, 0));
    assert_eq!(unsafe { kpbe_psnr(a.as_ptr(), a.as_ptr(), 16, 16, &mut db, &mut identical) }, KpbeStatus::Ok);
    assert_eq!(identical, 1);
    assert!(db.is_infinite());

    let mut s = f64::NAN;
    assert_eq!(unsafe { kpbe_ssim(a.as_ptr(), a.as_ptr(), 16, 16, &mut s) }, KpbeStatus::Ok);
    assert!((s - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { kpbe_ssim(a.as_ptr(), a.as_ptr(), 8, 8, &mut s) }, KpbeStatus::InvalidArgument);
}
