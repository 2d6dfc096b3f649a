use std::ffi::{CStr, CString};
use std::ptr;

use gaussclust_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { gc_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(gc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let status = unsafe { gc_dataset_synthetic(3, 2, 32, 0, ptr::null_mut()) };
    assert_eq!(status, GcStatus::NullPointer);
    assert!(last_error().contains("out"));
    assert_eq!(unsafe { gc_dataset_len(ptr::null()) }, 0);
    unsafe { gc_dataset_free(ptr::null_mut()) };
    unsafe { gc_model_free(ptr::null_mut()) };
}

#[test]
fn error_message_truncates() {
    unsafe { gc_dataset_synthetic(3, 2, 32, 0, ptr::null_mut()) };
    let mut buf = [1 as std::ffi::c_char; 4];
    let full = unsafe { gc_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(full > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn invalid_dataset_arguments() {
    let mut ds = ptr::null_mut();
    let status = unsafe { gc_dataset_synthetic(0, 2, 32, 0, &mut ds) };
    assert_eq!(status, GcStatus::InvalidArgument);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn missing_folder_is_io() {
    let root = CString::new("/definitely/not/here").unwrap();
    let mut ds = ptr::null_mut();
    let status = unsafe { gc_dataset_load_folder(root.as_ptr(), 32, 32, true, 2, true, &mut ds) };
    assert_eq!(status, GcStatus::Io);
}

#[test]
fn evaluate_scores_a_relabelling() {
    let pred = [1usize, 1, 0, 0, 2, 2];
    let truth = [0usize, 0, 1, 1, 2, 2];
    let mut r = GcReport::default();
    assert_eq!(unsafe { gc_evaluate(pred.as_ptr(), truth.as_ptr(), 6, &mut r) }, GcStatus::Ok);
    assert!((r.acc - 1.0).abs() < 1e-12);
    assert!((r.nmi - 1.0).abs() < 1e-12);
    assert!((r.ari - 1.0).abs() < 1e-12);
}

#[test]
fn map_to_2d_matches_one_hots() {
    let (mut x, mut y) = (f64::NAN, f64::NAN);
    let l = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { gc_map_to_2d(l.as_ptr(), 4, &mut x, &mut y) }, GcStatus::Ok);
    assert!((x - 1.0).abs() < 1e-9 && y.abs() < 1e-9);
    assert_eq!(unsafe { gc_map_to_2d(l.as_ptr(), 0, &mut x, &mut y) }, GcStatus::InvalidArgument);
}

#[test]
fn dataset_model_roundtrip() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(gc_dataset_synthetic(2, 3, 32, 7, &mut ds), GcStatus::Ok);
        assert_eq!(gc_dataset_len(ds), 6);
        let mut labels = [9usize; 6];
        assert_eq!(gc_dataset_labels(ds, labels.as_mut_ptr(), 6), GcStatus::Ok);
        assert!(labels.iter().all(|&l| l < 2));
        assert_eq!(gc_dataset_labels(ds, labels.as_mut_ptr(), 5), GcStatus::InvalidArgument);

        let mut model = ptr::null_mut();
        assert_eq!(gc_model_new_small(ds, 1, &mut model), GcStatus::Ok);
        assert_eq!(gc_model_cluster_count(model), 2);

        let cfg = CString::new("epochs = 1\nmacro_batch = 6\nsub_batch = 3\nmini_batch = 3\n").unwrap();
        assert_eq!(gc_train(model, ds, cfg.as_ptr()), GcStatus::Ok, "{}", last_error());

        let mut ids = [9usize; 6];
        assert_eq!(gc_predict(model, ds, ids.as_mut_ptr(), 6), GcStatus::Ok);
        assert!(ids.iter().all(|&i| i < 2));

        let bad = CString::new("no_such_key = 1").unwrap();
        assert_eq!(gc_train(model, ds, bad.as_ptr()), GcStatus::InvalidArgument);

        gc_model_free(model);
        gc_dataset_free(ds);
    }
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { gc_model_load(path.as_ptr(), &mut model) };
    assert_ne!(status, GcStatus::Ok);
    assert!(model.is_null());
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gaussclust.h")).unwrap();
    for name in [
        "gc_version",
        "gc_last_error_message",
        "gc_dataset_synthetic",
        "gc_dataset_load_folder",
        "gc_dataset_len",
        "gc_dataset_labels",
        "gc_dataset_free",
        "gc_model_new_small",
        "gc_model_load",
        "gc_model_cluster_count",
        "gc_model_free",
        "gc_train",
        "gc_predict",
        "gc_evaluate",
        "gc_map_to_2d",
        "GC_STATUS_GROUND_TRUTH_REQUIRED",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
