use std::ffi::{CStr, CString};
use std::ptr;

use dkaft::data::{synth_generate, SynthConfig};
use dkaft_ffi::*;

fn last_error() -> String {
    let p = dkaft_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn load(path: &std::path::Path) -> *mut DkaftDataset {
    let mut out = ptr::null_mut();
    let p = cstr(path.to_str().unwrap());
    assert_eq!(unsafe { dkaft_dataset_load(p.as_ptr(), &mut out) }, DkaftStatus::Ok);
    out
}

#[test]
fn train_predict_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n: 140,
        n_sta: 3,
        n_seq: 2,
        t_max: 8,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg, 7).unwrap();
    let train_path = dir.path().join("train.jsonl");
    let val_path = dir.path().join("val.jsonl");
    data.subset(&(0..100).collect::<Vec<_>>()).write_jsonl(&train_path).unwrap();
    data.subset(&(100..140).collect::<Vec<_>>()).write_jsonl(&val_path).unwrap();

    let train = load(&train_path);
    let val = load(&val_path);
    assert_eq!(unsafe { dkaft_dataset_len(train) }, 100);

    let config = cstr("head = ppgp\nepochs = 2\nnum_inducing = 8\nn_seq_repr = 4\nn_seq_emb = 4\n");
    let mut model = ptr::null_mut();
    let st = unsafe { dkaft_model_train(config.as_ptr(), train, val, &mut model) };
    assert_eq!(st, DkaftStatus::Ok);

    let n = 40;
    let (mut mu, mut f2, mut o2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let st = unsafe { dkaft_model_predict(model, val, mu.as_mut_ptr(), f2.as_mut_ptr(), o2.as_mut_ptr(), n) };
    assert_eq!(st, DkaftStatus::Ok);
    assert!(mu.iter().all(|m| m.is_finite()));
    assert!(f2.iter().all(|&v| v >= 0.0) && o2.iter().all(|&v| v > 0.0));

    let ck = cstr(dir.path().join("model.json").to_str().unwrap());
    assert_eq!(unsafe { dkaft_model_save(model, ck.as_ptr()) }, DkaftStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { dkaft_model_load(ck.as_ptr(), &mut back) }, DkaftStatus::Ok);
    let mut mu2 = vec![0.0; n];
    let st = unsafe { dkaft_model_predict(back, val, mu2.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), n) };
    assert_eq!(st, DkaftStatus::Ok);
    assert_eq!(mu, mu2);

    let st = unsafe { dkaft_model_predict(back, val, mu2.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), n - 1) };
    assert_eq!(st, DkaftStatus::InvalidArgument);

    let bad = cstr("head = forest\n");
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { dkaft_model_train(bad.as_ptr(), train, val, &mut none) }, DkaftStatus::Config);
    assert!(last_error().contains("forest"));
    assert!(none.is_null());

    unsafe {
        dkaft_model_free(model);
        dkaft_model_free(back);
        dkaft_dataset_free(train);
        dkaft_dataset_free(val);
    }
}

#[test]
fn error_codes() {
    let mut out = ptr::null_mut();
    let missing = cstr("/nonexistent/data.jsonl");
    assert_eq!(unsafe { dkaft_dataset_load(missing.as_ptr(), &mut out) }, DkaftStatus::Data);
    assert!(last_error().contains("/nonexistent/data.jsonl"));
    assert_eq!(unsafe { dkaft_dataset_load(ptr::null(), &mut out) }, DkaftStatus::InvalidArgument);
    assert_eq!(unsafe { dkaft_dataset_len(ptr::null()) }, 0);
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dkaft_model_train(ptr::null(), ptr::null(), ptr::null(), &mut m) },
        DkaftStatus::InvalidArgument
    );
    unsafe {
        dkaft_dataset_free(ptr::null_mut());
        dkaft_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dkaft.h")).unwrap();
    for name in [
        "dkaft_last_error",
        "dkaft_dataset_load",
        "dkaft_dataset_free",
        "dkaft_model_train",
        "dkaft_model_predict",
        "dkaft_model_save",
        "dkaft_model_load",
        "dkaft_model_free",
        "typedef struct DkaftModel DkaftModel",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
