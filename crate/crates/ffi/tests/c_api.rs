use std::ffi::{CStr, CString};
use std::ptr;

use maskmatch_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        assert_eq!(mm_train(ptr::null(), ptr::null_mut()), MmStatus::NullPointer);
        assert!(last_error().contains("config"));
        let mut model = ptr::null_mut();
        assert_eq!(mm_model_load(ptr::null(), &mut model), MmStatus::NullPointer);
        assert!(model.is_null());
        assert_eq!(mm_model_num_classes(ptr::null()), 0);
        mm_config_free(ptr::null_mut());
        mm_model_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_carry_codes() {
    unsafe {
        let cfg = mm_config_new();
        assert_eq!(mm_config_set(cfg, cstr("train.mode").as_ptr(), cstr("full").as_ptr()), MmStatus::Ok);
        assert_eq!(mm_config_set(cfg, cstr("train.bogus").as_ptr(), cstr("1").as_ptr()), MmStatus::Config);
        assert!(last_error().contains("train.bogus"));
        let bad = [0xffu8, 0];
        assert_eq!(
            mm_config_set(cfg, bad.as_ptr().cast(), cstr("1").as_ptr()),
            MmStatus::InvalidUtf8
        );
        mm_config_free(cfg);
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("nope.bin").to_str().unwrap());
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(mm_model_load(path.as_ptr(), &mut model), MmStatus::Io);
    }
    assert!(model.is_null());
}

#[test]
fn generate_train_load_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let data_c = cstr(data.to_str().unwrap());
    unsafe {
        assert_eq!(mm_generate_dataset(data_c.as_ptr(), 3, 32, 32, 2, 2, 2, 5), MmStatus::Ok);

        let cfg = mm_config_new();
        for (k, v) in [
            ("data.dir", data.to_str().unwrap()),
            ("out.dir", out.to_str().unwrap()),
            ("model.base_width", "4"),
            ("model.depth", "2"),
            ("aug.crop", "16"),
            ("train.batch_labeled", "2"),
            ("train.batch_unlabeled", "2"),
            ("train.max_iter", "2"),
            ("mask.patch_size", "4"),
        ] {
            assert_eq!(mm_config_set(cfg, cstr(k).as_ptr(), cstr(v).as_ptr()), MmStatus::Ok, "{k}");
        }
        let mut metrics = MmMetrics::default();
        assert_eq!(mm_train(cfg, &mut metrics), MmStatus::Ok, "{}", last_error());
        assert_eq!(metrics.step, 2);
        assert!((0.0..=1.0).contains(&metrics.miou));
        mm_config_free(cfg);

        let ckpt = cstr(out.join("checkpoints/step_2.bin").to_str().unwrap());
        let mut model = ptr::null_mut();
        assert_eq!(mm_model_load(ckpt.as_ptr(), &mut model), MmStatus::Ok);
        assert_eq!(mm_model_num_classes(model), 3);

        let image = vec![0.5f64; 3 * 32 * 32];
        let mut labels = vec![255u8; 32 * 32];
        assert_eq!(mm_model_predict(model, image.as_ptr(), 32, 32, labels.as_mut_ptr()), MmStatus::Ok);
        assert!(labels.iter().all(|&c| c < 3));
        assert_eq!(
            mm_model_predict(model, image.as_ptr(), 30, 30, labels.as_mut_ptr()),
            MmStatus::Config
        );

        let mut again = MmMetrics::default();
        assert_eq!(mm_evaluate(model, data_c.as_ptr(), MmSplit::Val, 0.0003, &mut again), MmStatus::Ok);
        assert_eq!(again, metrics);
        mm_model_free(model);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/maskmatch.h")).unwrap();
    for name in [
        "mm_last_error",
        "mm_generate_dataset",
        "mm_config_new",
        "mm_config_set",
        "mm_train",
        "mm_model_load",
        "mm_model_predict",
        "mm_evaluate",
        "MM_STATUS_NULL_POINTER",
        "typedef struct MmModel MmModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(mm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
