//! C ABI over the `maskmatch` crate.
//!
//! Handles are opaque pointers created by `mm_*_new`/`mm_*_load` and released
//! by the matching `mm_*_free`. Every fallible call returns an [`MmStatus`];
//! on failure a description is available from [`mm_last_error`] until the next
//! failing call on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use maskmatch::checkpoint::Checkpoint;
use maskmatch::config::TrainConfig;
use maskmatch::dataset::{self, Dataset, GenerateParams, Split};
use maskmatch::metrics::MetricsRecord;
use maskmatch::{segnet, train, Error, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Format = 6,
    NonFinite = 7,
    Invalid = 8,
    Panic = 9,
}

/// Dataset splits.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmSplit {
    Labeled = 0,
    Unlabeled = 1,
    Val = 2,
}

/// Evaluation summary.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MmMetrics {
    pub miou: f64,
    pub boundary_f: f64,
    pub boundary_precision: f64,
    pub boundary_recall: f64,
    pub pixel_accuracy: f64,
    pub step: u64,
}

/// Training configuration handle.
pub struct MmConfig {
    inner: TrainConfig,
}

/// Trained teacher network loaded from a checkpoint.
pub struct MmModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MmStatus {
    match e {
        Error::Config(_) => MmStatus::Config,
        Error::Shape(_) => MmStatus::Shape,
        Error::NonFinite(_) => MmStatus::NonFinite,
        Error::Io { .. } => MmStatus::Io,
        Error::Format { .. } => MmStatus::Format,
        _ => MmStatus::Invalid,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MmStatus>) -> MmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MmStatus::Panic
        }
    }
}

fn fail(e: Error) -> MmStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> MmStatus {
    set_error(format!("{what} is NULL"));
    MmStatus::NullPointer
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, MmStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        MmStatus::InvalidUtf8
    })
}

fn write_metrics(out: *mut MmMetrics, r: &MetricsRecord) {
    if !out.is_null() {
        // SAFETY: non-NULL `out` points to writable storage per the API contract.
        unsafe {
            *out = MmMetrics {
                miou: r.miou,
                boundary_f: r.boundary_f,
                boundary_precision: r.boundary_precision,
                boundary_recall: r.boundary_recall,
                pixel_accuracy: r.pixel_accuracy,
                step: r.step,
            };
        }
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes the synthetic dataset to `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mm_generate_dataset(
    out_dir: *const c_char,
    num_classes: u32,
    height: u32,
    width: u32,
    labeled: u32,
    unlabeled: u32,
    val: u32,
    seed: u64,
) -> MmStatus {
    guard(|| {
        let dir = str_arg(out_dir, "out_dir")?;
        let params = GenerateParams {
            num_classes: num_classes as usize,
            height: height as usize,
            width: width as usize,
            labeled: labeled as usize,
            unlabeled: unlabeled as usize,
            val: val as usize,
            seed,
        };
        dataset::generate_dataset(&params, &PathBuf::from(dir)).map_err(fail)?;
        Ok(())
    })
}

/// New configuration with default values.
#[no_mangle]
pub extern "C" fn mm_config_new() -> *mut MmConfig {
    Box::into_raw(Box::new(MmConfig {
        inner: TrainConfig::default(),
    }))
}

/// # Safety
/// `config` must be NULL or a handle from [`mm_config_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mm_config_free(config: *mut MmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Sets one dotted key, e.g. `train.mode` to `full`.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mm_config_set(
    config: *mut MmConfig,
    key: *const c_char,
    value: *const c_char,
) -> MmStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        let k = str_arg(key, "key")?;
        let v = str_arg(value, "value")?;
        cfg.inner.set(k, v).map_err(fail)
    })
}

/// Trains with `config` and writes the final validation metrics to `out`.
///
/// # Safety
/// `config` must be a live handle; `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn mm_train(config: *const MmConfig, out: *mut MmMetrics) -> MmStatus {
    guard(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let outcome = train::train(&cfg.inner).map_err(fail)?;
        write_metrics(out, &outcome.metrics);
        Ok(())
    })
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mm_model_load(path: *const c_char, out: *mut *mut MmModel) -> MmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = str_arg(path, "path")?;
        let checkpoint = Checkpoint::load(&PathBuf::from(p)).map_err(fail)?;
        *out = Box::into_raw(Box::new(MmModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`mm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mm_model_free(model: *mut MmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes predicted by `model`, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mm_model_num_classes(model: *const MmModel) -> u32 {
    model
        .as_ref()
        .map_or(0, |m| m.checkpoint.model.num_classes as u32)
}

/// Predicts class ids for one planar RGB image (`3 * height * width` values in
/// `[0, 1]`, channel-major) into `labels` (`height * width` bytes).
///
/// # Safety
/// `image` must point to `3 * height * width` doubles and `labels` to
/// `height * width` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mm_model_predict(
    model: *const MmModel,
    image: *const f64,
    height: u32,
    width: u32,
    labels: *mut u8,
) -> MmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let (h, w) = (height as usize, width as usize);
        let data = std::slice::from_raw_parts(image, 3 * h * w).to_vec();
        let t = Tensor::new(vec![1, 3, h, w], data).map_err(fail)?;
        let ck = &m.checkpoint;
        let logits = segnet::predict_logits(&ck.teacher.params, &ck.model, &t).map_err(fail)?;
        let pred = train::argmax_maps(&logits).map_err(fail)?;
        std::slice::from_raw_parts_mut(labels, h * w).copy_from_slice(&pred[0]);
        Ok(())
    })
}

/// Evaluates `model` on a split of the dataset at `data_dir`.
///
/// # Safety
/// `model` must be a live handle, `data_dir` a valid NUL-terminated string and
/// `out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn mm_evaluate(
    model: *const MmModel,
    data_dir: *const c_char,
    split: MmSplit,
    tol_frac: f64,
    out: *mut MmMetrics,
) -> MmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dir = str_arg(data_dir, "data_dir")?;
        let ds = Dataset::open(&PathBuf::from(dir)).map_err(fail)?;
        let split = match split {
            MmSplit::Labeled => Split::Labeled,
            MmSplit::Unlabeled => Split::Unlabeled,
            MmSplit::Val => Split::Val,
        };
        let r = train::evaluate(&m.checkpoint, &ds, split, tol_frac).map_err(fail)?;
        write_metrics(out, &r);
        Ok(())
    })
}
