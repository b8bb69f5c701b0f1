//! C ABI for trafx.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a [`TrafxStatus`]
//! and leaves a message retrievable with [`trafx_last_error_message`] on
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use trafx::codec::{encode_images, load_dataset, EncodeOptions, ImageDataset};
use trafx::flow::{clean, parse_flows, FlowSchema};
use trafx::metrics::{evaluate, IntervalMetric, PredictionSet};
use trafx::zoo::Model;
use trafx::Error;

/// Result of every fallible call. Codes 2 to 5 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrafxStatus {
    Ok = 0,
    ConfigError = 2,
    DataError = 3,
    NumericError = 4,
    DependencyError = 5,
    NullPointer = 10,
    InvalidArgument = 11,
    Panic = 12,
}

/// Test-set summary. Undefined metrics are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TrafxMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub mcc: f64,
    pub balanced_accuracy: f64,
    pub hamming_loss: f64,
    pub auc_macro: f64,
    pub log_loss: f64,
}

pub struct TrafxDataset {
    inner: ImageDataset,
}

pub struct TrafxModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> TrafxStatus {
    match err.exit_code() {
        2 => TrafxStatus::ConfigError,
        3 => TrafxStatus::DataError,
        4 => TrafxStatus::NumericError,
        _ => TrafxStatus::DependencyError,
    }
}

enum Failure {
    Status(TrafxStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TrafxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TrafxStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            TrafxStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(TrafxStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::Status(TrafxStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn nan_if_none(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next trafx call on the same thread.
#[no_mangle]
pub extern "C" fn trafx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn trafx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a `.trim` image container.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trafx_dataset_load(path: *const c_char, out: *mut *mut TrafxDataset) -> TrafxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let (inner, _) = load_dataset(&path)?;
        *out = Box::into_raw(Box::new(TrafxDataset { inner }));
        Ok(())
    })
}

/// Cleans a flow CSV and encodes it with the default schema, or with the
/// JSON schema at `schema_path` when it is non-null.
///
/// # Safety
/// String arguments must be NUL-terminated or null where allowed; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn trafx_encode_csv(
    csv_path: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut TrafxDataset,
) -> TrafxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let csv_path = path_arg(csv_path, "csv_path")?;
        let schema = if schema_path.is_null() {
            FlowSchema::default()
        } else {
            FlowSchema::from_json_file(&path_arg(schema_path, "schema_path")?)?
        };
        let file = File::open(&csv_path)
            .map_err(|e| Failure::Status(TrafxStatus::DataError, format!("{}: {e}", csv_path.display())))?;
        let table = parse_flows(BufReader::new(file), &schema)?;
        let (table, _) = clean(&table)?;
        let inner = encode_images(&table, &EncodeOptions::default())?;
        *out = Box::into_raw(Box::new(TrafxDataset { inner }));
        Ok(())
    })
}

/// Number of images; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn trafx_dataset_len(ds: *const TrafxDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn trafx_dataset_num_classes(ds: *const TrafxDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.num_classes())
}

/// Label of image `index`.
///
/// # Safety
/// `ds` must be a live handle; `label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trafx_dataset_label(ds: *const TrafxDataset, index: usize, label: *mut usize) -> TrafxStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        if label.is_null() {
            return Err(null("label"));
        }
        let img = ds.inner.images.get(index).ok_or_else(|| {
            Failure::Status(
                TrafxStatus::InvalidArgument,
                format!("index {index} out of range for {} images", ds.inner.len()),
            )
        })?;
        *label = img.label;
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trafx_dataset_free(ds: *mut TrafxDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trafx_model_load(path: *const c_char, out: *mut *mut TrafxModel) -> TrafxStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let inner = Model::load(&path)?;
        *out = Box::into_raw(Box::new(TrafxModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn trafx_model_num_classes(model: *const TrafxModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.classes())
}

/// Writes the class probabilities of image `index` into `probs`, which must
/// hold `len` doubles with `len` equal to the model's class count.
///
/// # Safety
/// Handles must be live; `probs` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn trafx_model_predict(
    model: *const TrafxModel,
    ds: *const TrafxDataset,
    index: usize,
    probs: *mut f64,
    len: usize,
) -> TrafxStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let ds = handle(ds, "dataset")?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        if len != model.inner.classes() {
            return Err(Failure::Status(
                TrafxStatus::InvalidArgument,
                format!("buffer holds {len} values, model has {} classes", model.inner.classes()),
            ));
        }
        let img = ds.inner.images.get(index).ok_or_else(|| {
            Failure::Status(
                TrafxStatus::InvalidArgument,
                format!("index {index} out of range for {} images", ds.inner.len()),
            )
        })?;
        let p = model.inner.probabilities(img)?;
        std::slice::from_raw_parts_mut(probs, len).copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trafx_model_free(model: *mut TrafxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Metrics for `n` predictions over `k` classes. `probs` is row-major
/// `n * k`, each row a probability vector; `labels` holds `n` true labels.
///
/// # Safety
/// `probs` must point to `n * k` doubles, `labels` to `n` values and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn trafx_metrics_from_probabilities(
    probs: *const f64,
    labels: *const usize,
    n: usize,
    k: usize,
    out: *mut TrafxMetrics,
) -> TrafxStatus {
    guard(|| {
        if probs.is_null() || labels.is_null() || out.is_null() {
            return Err(null("probs, labels or out"));
        }
        if n == 0 || k < 2 {
            return Err(Failure::Status(
                TrafxStatus::InvalidArgument,
                format!("need n > 0 and k >= 2, got n = {n}, k = {k}"),
            ));
        }
        let total = n
            .checked_mul(k)
            .ok_or_else(|| Failure::Status(TrafxStatus::InvalidArgument, "n * k overflows".into()))?;
        let flat = std::slice::from_raw_parts(probs, total);
        let rows = flat.chunks_exact(k).map(<[f64]>::to_vec).collect();
        let labels = std::slice::from_raw_parts(labels, n).to_vec();
        let names = (0..k).map(|c| format!("class{c}")).collect();
        let preds = PredictionSet::new(rows, labels, names)?;
        let r = evaluate(&preds, IntervalMetric::MacroF1)?;
        *out = TrafxMetrics {
            samples: r.samples,
            accuracy: r.accuracy,
            macro_precision: r.precision,
            macro_recall: r.recall,
            macro_f1: r.f1,
            kappa: nan_if_none(r.kappa),
            mcc: nan_if_none(r.mcc),
            balanced_accuracy: r.balanced_accuracy,
            hamming_loss: r.hamming_loss,
            auc_macro: nan_if_none(r.auc_macro),
            log_loss: r.log_loss,
        };
        Ok(())
    })
}
