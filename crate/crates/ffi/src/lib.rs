//! C ABI over the `bnmatch` engine.
//!
//! Models cross the boundary as opaque `BnmModel` handles created by
//! `bnm_model_new` / `bnm_model_load` / `bnm_model_from_string` and released
//! with `bnm_model_free`. Every fallible call returns a `BnmStatus`; on a
//! non-zero status `bnm_last_error_message` describes the failure for the
//! calling thread. Panics never unwind into C: they are caught and reported
//! as `BNM_STATUS_PANIC`.
//!
//! Matrices are row-major `double` arrays; labels are `size_t`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bnmatch::adaptation::{adapt, evaluate, pretrain, split_and_freeze, AdaptConfig, PretrainConfig};
use bnmatch::data::{Domain, LabeledDataset};
use bnmatch::losses::{bnm_loss, im_loss, StatPair};
use bnmatch::nn::{checkpoint, Model, Phase, Topology};
use bnmatch::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Io = 5,
    Numerical = 6,
    State = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct BnmModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(BnmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => BnmStatus::Config,
            Error::Parse { .. } => BnmStatus::Parse,
            Error::Io { .. } => BnmStatus::Io,
            Error::Numerical { .. } | Error::NonFinite(_) => BnmStatus::Numerical,
            Error::State(_) => BnmStatus::State,
            Error::Dimension { .. } | Error::EmptyBatch(_) | Error::Parameter(_) | Error::Contract(_) => {
                BnmStatus::InvalidArgument
            }
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: BnmStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any failure for `bnm_last_error_message` and converts
/// panics into `BNM_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BnmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BnmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BnmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(BnmStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(BnmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(fail(BnmStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_mut<'a>(m: *mut BnmModel) -> Result<&'a mut Model, Failure> {
    m.as_mut()
        .map(|m| &mut m.inner)
        .ok_or_else(|| fail(BnmStatus::NullPointer, "model is NULL"))
}

unsafe fn model_ref<'a>(m: *const BnmModel) -> Result<&'a Model, Failure> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(BnmStatus::NullPointer, "model is NULL"))
}

unsafe fn matrix_arg(x: *const f64, rows: usize, cols: usize) -> Result<Tensor, Failure> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| fail(BnmStatus::InvalidArgument, "rows * cols overflows"))?;
    let data = slice_arg(x, n, "features")?.to_vec();
    Ok(Tensor::matrix(rows, cols, data)?)
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> Result<T, Failure> {
    match json {
        None => Ok(T::default()),
        Some(text) => bnmatch::cli::config::parse(text).map_err(Failure::from),
    }
}

unsafe fn write_handle(out: *mut *mut BnmModel, model: Model) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(BnmStatus::NullPointer, "output handle pointer is NULL"));
    }
    *out = Box::into_raw(Box::new(BnmModel { inner: model }));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next `bnm_*` call on the same thread.
#[no_mangle]
pub extern "C" fn bnm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bnm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fresh model. `topology_json` may be NULL for the default
/// `2 -> 32 -> 16 -> 3` network.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_new(
    topology_json: *const c_char,
    seed: u64,
    out: *mut *mut BnmModel,
) -> BnmStatus {
    guard(|| {
        let topo: Topology = parse_json(opt_str_arg(topology_json, "topology_json")?)?;
        write_handle(out, Model::from_topology(&topo, seed)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn bnm_model_load(path: *const c_char, out: *mut *mut BnmModel) -> BnmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        write_handle(out, checkpoint::load(Path::new(path))?)
    })
}

/// Parses a checkpoint held in memory.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_from_string(text: *const c_char, out: *mut *mut BnmModel) -> BnmStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        write_handle(out, checkpoint::from_str(text)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn bnm_model_save(model: *const BnmModel, path: *const c_char) -> BnmStatus {
    guard(|| {
        let model = model_ref(model)?;
        let path = str_arg(path, "path")?;
        Ok(checkpoint::save(model, Path::new(path))?)
    })
}

/// Serializes the model into `buf` (NUL-terminated). `*needed` receives the
/// required size including the terminator; with a short or NULL buffer the
/// call returns `BNM_STATUS_BUFFER_TOO_SMALL` and writes nothing else.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_to_string(
    model: *const BnmModel,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> BnmStatus {
    guard(|| {
        let text = checkpoint::to_string(model_ref(model)?);
        let size = text.len() + 1;
        if !needed.is_null() {
            *needed = size;
        }
        if buf.is_null() || len < size {
            return Err(fail(
                BnmStatus::BufferTooSmall,
                format!("checkpoint needs {size} bytes, buffer has {len}"),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_free(model: *mut BnmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width of the model, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_input_dim(model: *const BnmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Number of classes, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_classes(model: *const BnmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.classes())
}

/// Class probabilities in inference mode. `probs` must hold
/// `rows * classes` values.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_predict(
    model: *mut BnmModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    probs: *mut f64,
    probs_len: usize,
) -> BnmStatus {
    guard(|| {
        let model = model_mut(model)?;
        let x = matrix_arg(x, rows, cols)?;
        let need = rows * model.classes();
        if probs.is_null() {
            return Err(fail(BnmStatus::NullPointer, "probs is NULL"));
        }
        if probs_len < need {
            return Err(fail(
                BnmStatus::BufferTooSmall,
                format!("probs needs {need} values, has {probs_len}"),
            ));
        }
        let p = model.predict(&x, Phase::Eval)?;
        ptr::copy_nonoverlapping(p.data().as_ptr(), probs, need);
        Ok(())
    })
}

unsafe fn labeled(
    model: &Model,
    x: *const f64,
    labels: *const usize,
    rows: usize,
    cols: usize,
) -> Result<LabeledDataset, Failure> {
    let x = matrix_arg(x, rows, cols)?;
    let labels = slice_arg(labels, rows, "labels")?.to_vec();
    Ok(LabeledDataset::new(x, labels, Domain::Source, model.classes())?)
}

/// Fraction of rows whose argmax prediction equals the label.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_evaluate(
    model: *mut BnmModel,
    x: *const f64,
    labels: *const usize,
    rows: usize,
    cols: usize,
    accuracy: *mut f64,
) -> BnmStatus {
    guard(|| {
        let model = model_mut(model)?;
        let ds = labeled(model, x, labels, rows, cols)?;
        if accuracy.is_null() {
            return Err(fail(BnmStatus::NullPointer, "accuracy is NULL"));
        }
        *accuracy = evaluate(model, &ds)?;
        Ok(())
    })
}

/// Supervised training of the whole model. `config_json` (may be NULL)
/// follows the `pretrain` section of the runner config.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_pretrain(
    model: *mut BnmModel,
    x: *const f64,
    labels: *const usize,
    rows: usize,
    cols: usize,
    config_json: *const c_char,
) -> BnmStatus {
    guard(|| {
        let model = model_mut(model)?;
        let cfg: PretrainConfig = parse_json(opt_str_arg(config_json, "config_json")?)?;
        let ds = labeled(model, x, labels, rows, cols)?;
        pretrain(model, &ds, None, &cfg)?;
        Ok(())
    })
}

/// Splits the model at its last BN layer, freezes the classifier and adapts
/// the encoder on unlabeled `x`. `config_json` (may be NULL) follows the
/// `adapt` section of the runner config. `final_loss`, if not NULL,
/// receives the last total loss.
#[no_mangle]
pub unsafe extern "C" fn bnm_model_adapt(
    model: *mut BnmModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    config_json: *const c_char,
    final_loss: *mut f64,
) -> BnmStatus {
    guard(|| {
        let model = model_mut(model)?;
        let cfg: AdaptConfig = parse_json(opt_str_arg(config_json, "config_json")?)?;
        let x = matrix_arg(x, rows, cols)?;
        let split = model
            .last_bn_index()
            .ok_or_else(|| fail(BnmStatus::Config, "model has no batch-norm layer"))?;
        // Work on a copy so a failed run leaves the handle untouched.
        let mut work = model.clone();
        let stored = split_and_freeze(&mut work, split, cfg.classifier_bn)?;
        let report = adapt(&mut work, &x, None, &stored, &cfg)?;
        *model = work;
        if !final_loss.is_null() {
            *final_loss = report.records.last().map_or(f64::NAN, |r| r.loss_total);
        }
        Ok(())
    })
}

/// Channel-averaged Gaussian KL from the stored to the batch statistics;
/// every array holds `channels` values.
#[no_mangle]
pub unsafe extern "C" fn bnm_bnm_loss(
    batch_mean: *const f64,
    batch_var: *const f64,
    stored_mean: *const f64,
    stored_var: *const f64,
    channels: usize,
    out: *mut f64,
) -> BnmStatus {
    guard(|| {
        let v = |p, what| slice_arg(p, channels, what).map(|s| Tensor::vector(s.to_vec()));
        if channels == 0 {
            return Err(fail(BnmStatus::InvalidArgument, "channels must be >= 1"));
        }
        let (bm, bv) = (v(batch_mean, "batch_mean")?, v(batch_var, "batch_var")?);
        let (sm, sv) = (v(stored_mean, "stored_mean")?, v(stored_var, "stored_var")?);
        if out.is_null() {
            return Err(fail(BnmStatus::NullPointer, "out is NULL"));
        }
        *out = bnm_loss(StatPair {
            batch_mean: &bm,
            batch_var: &bv,
            stored_mean: &sm,
            stored_var: &sv,
        })?;
        Ok(())
    })
}

/// Information-maximization loss of a `rows x classes` probability matrix.
#[no_mangle]
pub unsafe extern "C" fn bnm_im_loss(probs: *const f64, rows: usize, classes: usize, out: *mut f64) -> BnmStatus {
    guard(|| {
        let p = matrix_arg(probs, rows, classes)?;
        if out.is_null() {
            return Err(fail(BnmStatus::NullPointer, "out is NULL"));
        }
        *out = im_loss(&p)?;
        Ok(())
    })
}
