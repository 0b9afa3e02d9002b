//! C ABI over the dkaft library.
//!
//! Datasets and models are opaque handles owned by the caller and released
//! with the matching `*_free` function. Every fallible call returns a
//! [`DkaftStatus`]; on failure [`dkaft_last_error`] describes the problem.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dkaft::config::RunConfig;
use dkaft::data::Dataset;
use dkaft::model::{self, CheckpointKind, Model};
use dkaft::Error;

/// Status codes. Values 1 to 3 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DkaftStatus {
    Ok = 0,
    /// Invalid configuration or arguments.
    Config = 1,
    /// Invalid or unreadable input data.
    Data = 2,
    /// Numerical failure.
    Numeric = 3,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 4,
    /// The library panicked; the call had no effect on its outputs.
    Panic = 5,
}

/// Opaque collection of patient records.
pub struct DkaftDataset(Dataset);

/// Opaque trained model.
pub struct DkaftModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DkaftStatus {
    match e.exit_code() {
        1 => DkaftStatus::Config,
        2 => DkaftStatus::Data,
        _ => DkaftStatus::Numeric,
    }
}

struct Invalid(&'static str);

enum Failure {
    Lib(Error),
    Arg(Invalid),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Arg(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DkaftStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DkaftStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Arg(Invalid(msg)))) => {
            set_error(msg.to_string());
            DkaftStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic".to_string());
            DkaftStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Invalid> {
    if p.is_null() {
        return Err(Invalid(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Invalid(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Invalid> {
    p.as_ref().ok_or(Invalid(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn dkaft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a JSON Lines dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dkaft_dataset_load(path: *const c_char, out: *mut *mut DkaftDataset) -> DkaftStatus {
    guard(|| {
        if out.is_null() {
            return Err(Invalid("out must not be null").into());
        }
        let path = str_arg(path, "path must be a UTF-8 string")?;
        let data = Dataset::load_jsonl(path)?;
        *out = Box::into_raw(Box::new(DkaftDataset(data)));
        Ok(())
    })
}

/// Number of records, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dkaft_dataset_len(data: *const DkaftDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `data` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dkaft_dataset_free(data: *mut DkaftDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Train a model. `config` holds `key = value` lines in the configuration
/// file format and may be NULL for defaults.
///
/// # Safety
/// `train` and `val` must be live handles, `config` NULL or a NUL-terminated
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dkaft_model_train(
    config: *const c_char,
    train: *const DkaftDataset,
    val: *const DkaftDataset,
    out: *mut *mut DkaftModel,
) -> DkaftStatus {
    guard(|| {
        if out.is_null() {
            return Err(Invalid("out must not be null").into());
        }
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse_str(str_arg(config, "config must be a UTF-8 string")?)?
        };
        let train = ref_arg(train, "train must not be null")?;
        let val = ref_arg(val, "val must not be null")?;
        let outcome = model::train(&cfg, &train.0, &val.0, None)?;
        *out = Box::into_raw(Box::new(DkaftModel(outcome.model)));
        Ok(())
    })
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dkaft_model_load(path: *const c_char, out: *mut *mut DkaftModel) -> DkaftStatus {
    guard(|| {
        if out.is_null() {
            return Err(Invalid("out must not be null").into());
        }
        let path = str_arg(path, "path must be a UTF-8 string")?;
        *out = Box::into_raw(Box::new(DkaftModel(Model::load(path)?)));
        Ok(())
    })
}

/// Write a model checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dkaft_model_save(model: *const DkaftModel, path: *const c_char) -> DkaftStatus {
    guard(|| {
        let model = ref_arg(model, "model must not be null")?;
        let path = str_arg(path, "path must be a UTF-8 string")?;
        model.0.save(path, CheckpointKind::Model)?;
        Ok(())
    })
}

/// Predict log-time distributions for every record of `data`. Each output
/// array must hold `len` doubles and `len` must equal the dataset length.
/// Any output pointer may be NULL to skip that quantity.
///
/// # Safety
/// Handles must be live and non-NULL output arrays writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dkaft_model_predict(
    model: *const DkaftModel,
    data: *const DkaftDataset,
    mu: *mut f64,
    sigma_f2: *mut f64,
    sigma_obs2: *mut f64,
    len: usize,
) -> DkaftStatus {
    guard(|| {
        let model = ref_arg(model, "model must not be null")?;
        let data = ref_arg(data, "data must not be null")?;
        if len != data.0.len() {
            return Err(Invalid("len must equal the dataset length").into());
        }
        let preds = model.0.predict(&data.0.records)?;
        for (i, p) in preds.iter().enumerate() {
            if !mu.is_null() {
                *mu.add(i) = p.mu;
            }
            if !sigma_f2.is_null() {
                *sigma_f2.add(i) = p.sigma_f2;
            }
            if !sigma_obs2.is_null() {
                *sigma_obs2.add(i) = p.sigma_obs2;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dkaft_model_free(model: *mut DkaftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
