use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use trafx::codec::{encode_images, save_dataset, EncodeOptions};
use trafx::synth::{generate, SynthConfig};
use trafx::zoo::{build, Family, ModelConfig};
use trafx_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(trafx_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn fixtures(dir: &Path) -> (CString, CString, CString) {
    let table = generate(&SynthConfig {
        records_per_class: 360,
        ..Default::default()
    })
    .unwrap();
    let csv = dir.join("flows.csv");
    table.write_csv(std::fs::File::create(&csv).unwrap()).unwrap();
    let ds = encode_images(&table, &EncodeOptions::default()).unwrap();
    let ds_path = dir.join("ds.trim");
    save_dataset(&ds, None, &ds_path).unwrap();
    let model = build(&ModelConfig::new(Family::MicroMobile, 4), 1).unwrap();
    let ckpt = dir.join("m.ckpt");
    model.save(&ckpt).unwrap();
    (cstr(&csv), cstr(&ds_path), cstr(&ckpt))
}

#[test]
fn dataset_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, ds_path, ckpt) = fixtures(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(trafx_dataset_load(ds_path.as_ptr(), &mut ds), TrafxStatus::Ok);
        assert_eq!(trafx_dataset_len(ds), 8);
        assert_eq!(trafx_dataset_num_classes(ds), 4);

        let mut encoded = ptr::null_mut();
        assert_eq!(trafx_encode_csv(csv.as_ptr(), ptr::null(), &mut encoded), TrafxStatus::Ok);
        assert_eq!(trafx_dataset_len(encoded), 8);
        trafx_dataset_free(encoded);

        let mut model = ptr::null_mut();
        assert_eq!(trafx_model_load(ckpt.as_ptr(), &mut model), TrafxStatus::Ok);
        assert_eq!(trafx_model_num_classes(model), 4);

        let n = trafx_dataset_len(ds);
        let mut probs = vec![0.0; n * 4];
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let row = &mut probs[i * 4..(i + 1) * 4];
            assert_eq!(trafx_model_predict(model, ds, i, row.as_mut_ptr(), 4), TrafxStatus::Ok);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(trafx_dataset_label(ds, i, &mut labels[i]), TrafxStatus::Ok);
        }
        let mut metrics = TrafxMetrics::default();
        assert_eq!(
            trafx_metrics_from_probabilities(probs.as_ptr(), labels.as_ptr(), n, 4, &mut metrics),
            TrafxStatus::Ok
        );
        assert_eq!(metrics.samples, n);
        assert!((0.0..=1.0).contains(&metrics.accuracy));
        assert!((metrics.hamming_loss - (1.0 - metrics.accuracy)).abs() < 1e-12);

        let mut one = [0.0; 3];
        assert_eq!(
            trafx_model_predict(model, ds, 0, one.as_mut_ptr(), 3),
            TrafxStatus::InvalidArgument
        );
        assert!(last_error().contains("4 classes"));
        assert_eq!(
            trafx_model_predict(model, ds, 99, probs.as_mut_ptr(), 4),
            TrafxStatus::InvalidArgument
        );

        trafx_model_free(model);
        trafx_dataset_free(ds);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = CString::new("/nonexistent/ds.trim").unwrap();
        assert_eq!(trafx_dataset_load(missing.as_ptr(), &mut ds), TrafxStatus::DataError);
        assert!(ds.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(trafx_dataset_load(ptr::null(), &mut ds), TrafxStatus::NullPointer);
        assert_eq!(trafx_dataset_len(ptr::null()), 0);
        trafx_dataset_free(ptr::null_mut());
        trafx_model_free(ptr::null_mut());

        // rows that are not probability vectors
        let probs = [0.9, 0.9, 0.1, 0.1];
        let labels = [0usize, 1];
        let mut m = TrafxMetrics::default();
        assert_eq!(
            trafx_metrics_from_probabilities(probs.as_ptr(), labels.as_ptr(), 2, 2, &mut m),
            TrafxStatus::NumericError
        );
        assert!(last_error().contains("probability vector"));
    }
}

#[test]
fn metrics_undefined_values_are_nan() {
    // every truth and prediction in class 0: kappa and MCC are undefined
    let probs = [1.0, 0.0, 1.0, 0.0];
    let labels = [0usize, 0];
    let mut m = TrafxMetrics::default();
    let status = unsafe { trafx_metrics_from_probabilities(probs.as_ptr(), labels.as_ptr(), 2, 2, &mut m) };
    assert_eq!(status, TrafxStatus::Ok);
    assert_eq!(m.accuracy, 1.0);
    assert!(m.kappa.is_nan() && m.mcc.is_nan() && m.auc_macro.is_nan());
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/trafx.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "trafx_last_error_message",
        "trafx_version",
        "trafx_dataset_load",
        "trafx_encode_csv",
        "trafx_dataset_len",
        "trafx_dataset_num_classes",
        "trafx_dataset_label",
        "trafx_dataset_free",
        "trafx_model_load",
        "trafx_model_num_classes",
        "trafx_model_predict",
        "trafx_model_free",
        "trafx_metrics_from_probabilities",
        "TRAFX_STATUS_DEPENDENCY_ERROR = 5",
        "typedef struct TrafxModel TrafxModel;",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // syntax check only when a C compiler is available
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn version_is_static_string() {
    let v = unsafe { CStr::from_ptr(trafx_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
