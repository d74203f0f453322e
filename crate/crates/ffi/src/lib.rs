//! C ABI over the metasched library.
//!
//! Every fallible function returns an [`MsStatus`]; on failure the message
//! is available from [`ms_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings
//! returned through `char **` out-parameters are owned by the caller and
//! released with [`ms_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use metasched::analysis::{finite_diff_check, CheckTarget};
use metasched::harness::{no_observer, run_training, Experiment, RunConfig, TrainOutcome};
use metasched::losses::LossSelector;
use metasched::meta::{instance_metagrad, meta_loss_and_grad, rollout_one_step};
use metasched::nn::{forward, mlp_manifest, per_sample_backward};
use metasched::{Activation, Batch, DataParamState, Error, Matrix, ParamVector, WeightMode};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad arguments, configuration or data.
    Invalid = 2,
    /// Non-finite values or divergence.
    Numeric = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsActivation {
    Identity = 0,
    Relu = 1,
    Tanh = 2,
}

impl From<MsActivation> for Activation {
    fn from(a: MsActivation) -> Self {
        match a {
            MsActivation::Identity => Activation::Identity,
            MsActivation::Relu => Activation::Relu,
            MsActivation::Tanh => Activation::Tanh,
        }
    }
}

/// An MLP and its flat parameter vector.
pub struct MsModel {
    params: ParamVector,
}

/// A configured training run and, once trained, its outcome.
pub struct MsRun {
    config: RunConfig,
    outcome: Option<TrainOutcome>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_numeric() {
            MsStatus::Numeric
        } else if matches!(e, Error::Io { .. }) {
            MsStatus::Io
        } else {
            MsStatus::Invalid
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MsStatus::Invalid, msg.into())
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MsStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains a nul byte"))
}

unsafe fn batch(
    x: *const f64,
    labels: *const usize,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Batch, Failure> {
    let feats = slice(x, rows * cols, what)?;
    let labels = slice(labels, rows, "labels")?;
    let m = Matrix::from_vec(rows, cols, feats.to_vec())?;
    Ok(Batch::new(m, labels.to_vec(), (0..rows).collect())?)
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ms_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an MLP `in_dim -> hidden[0] -> ... -> out_dim` with seeded
/// initialization. The output layer is linear.
///
/// # Safety
/// `hidden` must point to `n_hidden` values; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ms_model_new(
    in_dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    out_dim: usize,
    activation: MsActivation,
    seed: u64,
    out_model: *mut *mut MsModel,
) -> MsStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let hidden = slice(hidden, n_hidden, "hidden")?;
        let params = ParamVector::init(mlp_manifest(in_dim, hidden, out_dim, activation.into()), seed)?;
        *slot = Box::into_raw(Box::new(MsModel { params }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`ms_model_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ms_model_free(model: *mut MsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn ms_model_param_count(model: *const MsModel, count: *mut usize) -> MsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(count, "count")? = m.params.len();
        Ok(())
    })
}

/// Copies the flat parameters into `buf`, which must hold exactly the
/// parameter count.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_model_get_params(model: *const MsModel, buf: *mut f64, len: usize) -> MsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if len != m.params.len() {
            return Err(invalid(format!("buffer holds {len} values, model has {}", m.params.len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(m.params.values());
        Ok(())
    })
}

/// Replaces the flat parameters; all values must be finite.
///
/// # Safety
/// `values` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_model_set_params(model: *mut MsModel, values: *const f64, len: usize) -> MsStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let v = slice(values, len, "values")?;
        m.params = m.params.with_values(v.to_vec())?;
        Ok(())
    })
}

/// Logits for `rows` samples of `cols` features (row-major) into `logits`,
/// which holds `rows * out_dim` values.
///
/// # Safety
/// Buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ms_model_forward(
    model: *const MsModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    logits: *mut f64,
    logits_len: usize,
) -> MsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let feats = Matrix::from_vec(rows, cols, slice(x, rows * cols, "x")?.to_vec())?;
        let z = forward(&m.params, &feats)?;
        let dst = slice_mut(logits, logits_len, "logits")?;
        if dst.len() != z.as_slice().len() {
            return Err(invalid(format!(
                "logits buffer holds {} values, need {}",
                dst.len(),
                z.as_slice().len()
            )));
        }
        dst.copy_from_slice(z.as_slice());
        Ok(())
    })
}

/// One-step meta-gradient of the meta loss with respect to each train
/// row's multiplier, at unit multipliers and weight decay `lambda_wd`.
/// Writes `train_rows` values to `grads`.
///
/// # Safety
/// Buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ms_instance_metagrad(
    model: *const MsModel,
    train_x: *const f64,
    train_labels: *const usize,
    train_rows: usize,
    meta_x: *const f64,
    meta_labels: *const usize,
    meta_rows: usize,
    lr: f64,
    lambda_wd: f64,
    grads: *mut f64,
) -> MsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cols = m.params.input_dim();
        let train = batch(train_x, train_labels, train_rows, cols, "train_x")?;
        let meta = batch(meta_x, meta_labels, meta_rows, cols, "meta_x")?;
        let dst = slice_mut(grads, train_rows, "grads")?;
        let dps = DataParamState::new(train_rows, m.params.output_dim(), WeightMode::Instance, lambda_wd);
        let rolled = rollout_one_step(&m.params, &train, &dps, lr)?;
        let (_, g_meta) = meta_loss_and_grad(&rolled, &meta)?;
        let per = per_sample_backward(&m.params, &train, LossSelector::PlainCe, &DataParamState::empty())?;
        let inst = instance_metagrad(&per.grads, &train.indices, &g_meta, lr)?;
        for (i, d) in dst.iter_mut().enumerate() {
            *d = inst[&i];
        }
        Ok(())
    })
}

/// Runs every gradient check with `trials` random problems. `all_pass` is
/// set to 1 when every target passes; `report_json`, when not null,
/// receives a JSON array of per-target reports.
///
/// # Safety
/// `all_pass` must be writable; `report_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn ms_gradcheck(
    trials: usize,
    seed: u64,
    all_pass: *mut i32,
    report_json: *mut *mut c_char,
) -> MsStatus {
    guard(|| {
        let flag = out(all_pass, "all_pass")?;
        let reports = CheckTarget::ALL
            .iter()
            .map(|&t| finite_diff_check(t, trials, seed))
            .collect::<metasched::Result<Vec<_>>>()?;
        *flag = i32::from(reports.iter().all(|r| r.pass));
        if let Some(slot) = report_json.as_mut() {
            *slot = into_c_string(serde_json::to_string(&reports).map_err(Error::from)?)?;
        }
        Ok(())
    })
}

/// Parses a `key = value` configuration.
///
/// # Safety
/// `config_text` must be a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn ms_run_new(config_text: *const c_char, out_run: *mut *mut MsRun) -> MsStatus {
    guard(|| {
        let slot = out(out_run, "out_run")?;
        if config_text.is_null() {
            return Err(null("config_text"));
        }
        let text = CStr::from_ptr(config_text)
            .to_str()
            .map_err(|_| invalid("configuration is not UTF-8"))?;
        let config = RunConfig::parse(text)?;
        *slot = Box::into_raw(Box::new(MsRun { config, outcome: None }));
        Ok(())
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must come from [`ms_run_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ms_run_free(run: *mut MsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Builds the data and trains to completion. Retraining replaces the
/// previous outcome.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ms_run_train(run: *mut MsRun) -> MsStatus {
    guard(|| {
        let r = run.as_mut().ok_or_else(|| null("run"))?;
        let exp = Experiment::prepare(&r.config)?;
        r.outcome = Some(run_training(&r.config, &exp, &mut no_observer)?);
        Ok(())
    })
}

/// Per-epoch metrics of a trained run as line-delimited JSON.
///
/// # Safety
/// `run` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn ms_run_metrics_json(run: *const MsRun, out_json: *mut *mut c_char) -> MsStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let slot = out(out_json, "out_json")?;
        let outcome = r.outcome.as_ref().ok_or_else(|| invalid("run has not been trained"))?;
        let text = metasched::harness::metrics::to_jsonl(&outcome.metrics)?;
        *slot = into_c_string(text)?;
        Ok(())
    })
}

/// Copies the trained (evaluation) parameters into a new model handle.
///
/// # Safety
/// `run` must be a live handle and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn ms_run_model(run: *const MsRun, out_model: *mut *mut MsModel) -> MsStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let slot = out(out_model, "out_model")?;
        let outcome = r.outcome.as_ref().ok_or_else(|| invalid("run has not been trained"))?;
        *slot = Box::into_raw(Box::new(MsModel {
            params: outcome.model.clone(),
        }));
        Ok(())
    })
}
