//! C interface to `metassl`.
//!
//! Every function returns a [`MetasslStatus`]. On anything other than
//! `METASSL_STATUS_OK` a description is available from
//! [`metassl_last_error_message`] on the same thread. Handles are opaque and
//! must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use metassl::data::{self, CsvSchema, Dataset, Split, Standardizer};
use metassl::model::Checkpoint;
use metassl::trainer::{self, TrainConfig};
use metassl::verify::{self, SuiteOptions, VerifyReport};
use metassl::{eval, Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetasslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Numerical = 6,
    /// A check ran to completion and failed.
    VerifyFailed = 7,
    Internal = 99,
}

/// Which part of a dataset an accuracy query refers to.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetasslSplit {
    Labeled = 0,
    Unlabeled = 1,
    Test = 2,
}

impl From<MetasslSplit> for Split {
    fn from(s: MetasslSplit) -> Split {
        match s {
            MetasslSplit::Labeled => Split::Labeled,
            MetasslSplit::Unlabeled => Split::Unlabeled,
            MetasslSplit::Test => Split::Test,
        }
    }
}

/// A dataset with its labeled / unlabeled / test assignment.
pub struct MetasslDataset {
    inner: Dataset,
}

/// A classifier together with the standardization it expects.
pub struct MetasslModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let mut msg = msg.into();
    msg.retain(|c| c != '\0');
    let c = CString::new(msg).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MetasslStatus {
    match err {
        Error::Io(_) => MetasslStatus::Io,
        Error::Parse { .. } | Error::Schema(_) => MetasslStatus::Parse,
        Error::Config(_) => MetasslStatus::Config,
        Error::NonFinite(_) => MetasslStatus::Numerical,
        _ => MetasslStatus::InvalidArgument,
    }
}

struct Fail(MetasslStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MetasslStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MetasslStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MetasslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MetasslStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(_) => {
            set_last_error("internal panic");
            MetasslStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn boxed_dataset(ds: Dataset) -> *mut MetasslDataset {
    Box::into_raw(Box::new(MetasslDataset { inner: ds }))
}

/// Message for the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn metassl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn metassl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a CSV with header `f0,...,label[,split]`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_ds` writable.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_load_csv(path: *const c_char, out_ds: *mut *mut MetasslDataset) -> MetasslStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_ds, "out_ds")?;
        let ds = data::load_csv(Path::new(path), &CsvSchema::default())?;
        *slot = boxed_dataset(ds);
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_save_csv(ds: *const MetasslDataset, path: *const c_char) -> MetasslStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        let path = str_arg(path, "path")?;
        data::save_csv(&ds.inner, Path::new(path))?;
        Ok(())
    })
}

/// Two interleaving half circles, `n` points, Gaussian noise `noise`.
///
/// # Safety
/// `out_ds` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_two_moons(n: usize, noise: f64, seed: u64, out_ds: *mut *mut MetasslDataset) -> MetasslStatus {
    guard(|| {
        let slot = out(out_ds, "out_ds")?;
        *slot = boxed_dataset(data::gen_two_moons(n, noise, seed)?);
        Ok(())
    })
}

/// `k` isotropic Gaussian blobs.
///
/// # Safety
/// `out_ds` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_blobs(
    n: usize,
    k: usize,
    spread: f64,
    sigma: f64,
    seed: u64,
    out_ds: *mut *mut MetasslDataset,
) -> MetasslStatus {
    guard(|| {
        let slot = out(out_ds, "out_ds")?;
        *slot = boxed_dataset(data::gen_blobs(n, k, spread, sigma, seed)?);
        Ok(())
    })
}

/// Moves `n_test` examples into the test split, stratified by class.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_hold_out_test(ds: *mut MetasslDataset, n_test: usize, seed: u64) -> MetasslStatus {
    guard(|| {
        let ds = out(ds, "ds")?;
        ds.inner = ds.inner.hold_out_test(n_test, seed)?;
        Ok(())
    })
}

/// Reveals `n_labeled` class-balanced labels; the other training rows become
/// unlabeled. `include_labeled` also places labeled rows in the unlabeled pool.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_split_labels(
    ds: *mut MetasslDataset,
    n_labeled: usize,
    seed: u64,
    include_labeled: bool,
) -> MetasslStatus {
    guard(|| {
        let ds = out(ds, "ds")?;
        ds.inner = data::split_labels(&ds.inner, n_labeled, seed)?.with_labeled_in_unlabeled(include_labeled);
        Ok(())
    })
}

/// Standardizes features with statistics of the non-test rows.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_standardize(ds: *mut MetasslDataset) -> MetasslStatus {
    guard(|| {
        let ds = out(ds, "ds")?;
        let st = Standardizer::fit(&ds.inner)?;
        ds.inner.standardize(&st)?;
        Ok(())
    })
}

/// Writes the row count, feature count and class count. Any of the output
/// pointers may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_shape(
    ds: *const MetasslDataset,
    rows: *mut usize,
    dim: *mut usize,
    classes: *mut usize,
) -> MetasslStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.inner;
        for (p, v) in [(rows, ds.len()), (dim, ds.dim()), (classes, ds.num_classes())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn metassl_dataset_free(ds: *mut MetasslDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains on `ds` with a `key = value` config, one setting per line or
/// separated by `;`. Null or empty `config` keeps the defaults.
///
/// If training diverges the last finite model is still returned through
/// `out_model` and the status is `METASSL_STATUS_NUMERICAL`.
///
/// # Safety
/// `ds` must be a live handle, `config` null or NUL-terminated, `out_model`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn metassl_train(
    ds: *const MetasslDataset,
    config: *const c_char,
    out_model: *mut *mut MetasslModel,
) -> MetasslStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        let slot = out(out_model, "out_model")?;
        let mut cfg = TrainConfig::default();
        if !config.is_null() {
            let text = str_arg(config, "config")?.replace(';', "\n");
            for (k, v) in metassl::trainer::parse_kv(&text)? {
                if !cfg.set(&k, &v)? {
                    return Err(Fail(MetasslStatus::Config, format!("unknown setting '{k}'")));
                }
            }
        }
        cfg.validate()?;
        let outcome = trainer::fit(&cfg, &ds.inner)?;
        *slot = Box::into_raw(Box::new(MetasslModel {
            inner: Checkpoint::new(outcome.model, None),
        }));
        match outcome.aborted {
            Some(why) => Err(Fail(MetasslStatus::Numerical, why)),
            None => Ok(()),
        }
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn metassl_model_load(path: *const c_char, out_model: *mut *mut MetasslModel) -> MetasslStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out(out_model, "out_model")?;
        let ck = Checkpoint::load(Path::new(path))?;
        *slot = Box::into_raw(Box::new(MetasslModel { inner: ck }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn metassl_model_save(model: *const MetasslModel, path: *const c_char) -> MetasslStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = str_arg(path, "path")?;
        model.inner.save(Path::new(path))?;
        Ok(())
    })
}

/// Input dimension, class count and total parameter count. Any output may be
/// null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn metassl_model_shape(
    model: *const MetasslModel,
    input_dim: *mut usize,
    classes: *mut usize,
    params: *mut usize,
) -> MetasslStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner.model;
        for (p, v) in [(input_dim, m.input_dim()), (classes, m.num_classes()), (params, m.num_params())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Predicted class for each of `rows` row-major inputs of the model's input
/// dimension. Raw features are standardized first if the model carries a
/// standardizer.
///
/// # Safety
/// `x` must hold `rows * input_dim` doubles and `out_classes` room for `rows`
/// values.
#[no_mangle]
pub unsafe extern "C" fn metassl_model_predict(
    model: *const MetasslModel,
    x: *const f64,
    rows: usize,
    out_classes: *mut usize,
) -> MetasslStatus {
    guard(|| {
        let ck = &handle(model, "model")?.inner;
        if x.is_null() {
            return Err(null("x"));
        }
        if out_classes.is_null() {
            return Err(null("out_classes"));
        }
        if rows == 0 {
            return Ok(());
        }
        let d = ck.model.input_dim();
        let len = rows.checked_mul(d).ok_or_else(|| invalid("rows * input_dim overflows"))?;
        let mut t = Tensor::matrix(rows, d, std::slice::from_raw_parts(x, len).to_vec())?;
        if let Some(st) = &ck.standardizer {
            t = st.apply(&t)?;
        }
        let pred = eval::predict(&ck.model, &t)?;
        std::slice::from_raw_parts_mut(out_classes, rows).copy_from_slice(&pred);
        Ok(())
    })
}

/// Top-1 accuracy on one split of `ds`. Fails with `METASSL_STATUS_INVALID_ARGUMENT`
/// when no example of that split has a known class.
///
/// # Safety
/// `model` and `ds` must be live handles and `out_accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn metassl_model_accuracy(
    model: *const MetasslModel,
    ds: *const MetasslDataset,
    split: MetasslSplit,
    out_accuracy: *mut f64,
) -> MetasslStatus {
    guard(|| {
        let ck = &handle(model, "model")?.inner;
        let ds = &handle(ds, "ds")?.inner;
        let slot = out(out_accuracy, "out_accuracy")?;
        let mut ds = ds.clone();
        if let Some(st) = &ck.standardizer {
            ds.standardize(st)?;
        }
        let split = Split::from(split);
        let acc = eval::accuracy(&ck.model, &ds, split)?
            .ok_or_else(|| invalid(format!("no {} examples with a known class", split.name())))?;
        *slot = acc.accuracy;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn metassl_model_free(model: *mut MetasslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs verification suites, comma separated or `all`. `steps` of 0 keeps
/// each suite's default horizon. Returns `METASSL_STATUS_VERIFY_FAILED` if any
/// suite fails. When `out_report` is non-null it receives the `key = value`
/// report, to be released with [`metassl_string_free`].
///
/// # Safety
/// `suites` must be NUL-terminated; `out_report` null or writable.
#[no_mangle]
pub unsafe extern "C" fn metassl_verify(
    suites: *const c_char,
    seed: u64,
    steps: usize,
    out_report: *mut *mut c_char,
) -> MetasslStatus {
    guard(|| {
        let names = str_arg(suites, "suites")?;
        let names: Vec<&str> = if names.trim() == "all" {
            verify::SUITES.to_vec()
        } else {
            names.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
        };
        let opts = SuiteOptions {
            seed,
            steps: (steps > 0).then_some(steps),
            ..SuiteOptions::default()
        };
        let mut report = VerifyReport::new(opts.safety);
        for name in names {
            verify::run_suite(name, &opts, &mut report)?;
        }
        if let Some(slot) = out_report.as_mut() {
            *slot = CString::new(report.to_kv())
                .map_err(|_| Fail(MetasslStatus::Internal, "report contains NUL".into()))?
                .into_raw();
        }
        if report.all_passed() {
            Ok(())
        } else {
            let failed: Vec<&str> = report.suites.iter().filter(|s| !s.1).map(|s| s.0.as_str()).collect();
            Err(Fail(MetasslStatus::VerifyFailed, format!("failed: {}", failed.join(", "))))
        }
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn metassl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
