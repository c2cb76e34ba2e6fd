//! C interface to the polarapp library.
//!
//! Every fallible function returns a [`PolarappStatus`]; on failure the
//! message is available from [`polarapp_last_error`] on the same thread.
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Panics never unwind into C: they
//! are caught and reported as [`PolarappStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use polarapp::app::{self, EvalOptions, Inference, Model, TrainOptions};
use polarapp::config::RunConfig;
use polarapp::metrics::{EvalReport, Regime};
use polarapp::optics::Pattern;
use polarapp::synth::{self, DatasetSpec, Split, Task};
use polarapp::verify::{self, Suite, VerifyOptions};
use polarapp::{Array, Error};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolarappStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad configuration or argument value.
    Config = 3,
    /// Filesystem or file-format failure.
    Io = 4,
    /// Numerical or shape failure inside the library.
    Runtime = 5,
    /// A library invariant was violated.
    Internal = 6,
    /// A panic was caught at the boundary.
    Panic = 7,
}

/// Output planes of an inference result.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolarappOutput {
    /// Demosaicked stack `[12, H, W]`, channel = 4 * color + angle.
    Stack = 0,
    /// Total intensity `[3, H, W]`.
    S0 = 1,
    /// Degree of linear polarization `[3, H, W]`.
    Dolp = 2,
    /// Angle of polarization in radians `[3, H, W]`.
    Aop = 3,
    /// Normals or transmission layer `[3, H, W]`.
    Task = 4,
}

/// A trained pipeline loaded from a checkpoint directory.
pub struct PolarappModel(Model);

/// Result of one evaluation run.
pub struct PolarappReport(EvalReport);

/// Result of running the pipeline on one input.
pub struct PolarappInference(Inference);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Fail(PolarappStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Invalid(_) => PolarappStatus::Config,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::Image(_) => PolarappStatus::Io,
            Error::Internal(_) => PolarappStatus::Internal,
            _ => PolarappStatus::Runtime,
        };
        Fail(code, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PolarappStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PolarappStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_last_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            PolarappStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(PolarappStatus::NullArgument, format!("`{name}` is null"))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PolarappStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

/// # Safety
/// `p` is null or a valid pointer to `T`.
unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(null(name))
    } else {
        Ok(p)
    }
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn polarapp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn polarapp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic dataset of `count` scenes of `size x size` pixels
/// into `out_dir` with the default split ratios. `task` is `"sfp"` or `"dfp"`.
///
/// # Safety
/// String arguments are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn polarapp_generate(task: *const c_char, count: usize, size: usize, seed: u64, out_dir: *const c_char) -> PolarappStatus {
    guard(|| {
        let task: Task = text(task, "task")?.parse()?;
        let out = PathBuf::from(text(out_dir, "out_dir")?);
        synth::make_dataset(&DatasetSpec { task, seed, count, size, split_ratios: synth::DEFAULT_SPLIT }, &out)?;
        Ok(())
    })
}

/// Trains from a JSON run configuration file. A negative
/// `stop_after_epoch` runs to completion. With `resume` set, training
/// continues from the newest checkpoint in the output directory.
///
/// # Safety
/// `config_path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn polarapp_train(config_path: *const c_char, stop_after_epoch: i64, resume: bool) -> PolarappStatus {
    guard(|| {
        let run = RunConfig::load(&PathBuf::from(text(config_path, "config_path")?))?;
        let opts = TrainOptions {
            resume: resume.then_some(None),
            stop_after_epoch: usize::try_from(stop_after_epoch).ok(),
        };
        app::train(&run, &opts, |_| {})?;
        Ok(())
    })
}

/// Loads a checkpoint directory. On success `*out` owns a new handle.
///
/// # Safety
/// `checkpoint` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn polarapp_model_load(checkpoint: *const c_char, out: *mut *mut PolarappModel) -> PolarappStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = Model::load(&PathBuf::from(text(checkpoint, "checkpoint")?))?;
        *out = Box::into_raw(Box::new(PolarappModel(model)));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` is null or came from [`polarapp_model_load`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn polarapp_model_free(model: *mut PolarappModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates `model` on a dataset split (`"train"`, `"meta_train"`,
/// `"meta_test"` or `"test"`) under a regime (`"with_A"` or `"without_A"`),
/// writing report files to `out_dir`. On success `*out` owns a new report.
///
/// # Safety
/// `model` is a live handle; strings are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn polarapp_model_evaluate(
    model: *const PolarappModel,
    dataset: *const c_char,
    split: *const c_char,
    regime: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut PolarappReport,
) -> PolarappStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let out = out_ptr(out, "out")?;
        let opts = EvalOptions {
            split: text(split, "split")?.parse::<Split>()?,
            regime: text(regime, "regime")?.parse::<Regime>()?,
            out: PathBuf::from(text(out_dir, "out_dir")?),
            panels: false,
            identity: false,
        };
        let r = app::evaluate(&model.0, &PathBuf::from(text(dataset, "dataset")?), &opts)?;
        *out = Box::into_raw(Box::new(PolarappReport(r)));
        Ok(())
    })
}

/// Number of scenes in a report.
///
/// # Safety
/// `report` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn polarapp_report_scene_count(report: *const PolarappReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.scenes.len())
}

/// Aggregate value of a metric such as `"s0_psnr"` or `"mae_deg"`.
///
/// # Safety
/// `report` is a live handle; `metric` is NUL-terminated; `value` is writable.
#[no_mangle]
pub unsafe extern "C" fn polarapp_report_metric(report: *const PolarappReport, metric: *const c_char, value: *mut f64) -> PolarappStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let value = out_ptr(value, "value")?;
        let name = text(metric, "metric")?;
        let v = r.0.aggregate.get(name).ok_or_else(|| Fail(PolarappStatus::Config, format!("report has no metric `{name}`")))?;
        *value = *v;
        Ok(())
    })
}

/// Releases a report. Null is ignored.
///
/// # Safety
/// `report` is null or came from [`polarapp_model_evaluate`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn polarapp_report_free(report: *mut PolarappReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Runs the pipeline on a row-major array of `rank` dimensions: either a
/// `[12, h, w]` stack or a raw `[H, W]` sensor frame. On success `*out`
/// owns a new result.
///
/// # Safety
/// `model` is a live handle; `shape` holds `rank` entries and `data` holds
/// their product; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn polarapp_model_infer(
    model: *const PolarappModel,
    data: *const f64,
    shape: *const usize,
    rank: usize,
    out: *mut *mut PolarappInference,
) -> PolarappStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        if shape.is_null() || rank == 0 {
            return Err(null("shape"));
        }
        let shape = std::slice::from_raw_parts(shape, rank).to_vec();
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Fail(PolarappStatus::Config, "shape overflows".into()))?;
        let input = Array::new(shape, std::slice::from_raw_parts(data, n).to_vec())?;
        let r = app::infer(&model.0, &input)?;
        *out = Box::into_raw(Box::new(PolarappInference(r)));
        Ok(())
    })
}

/// Borrows one output plane, selected by a [`PolarappOutput`] value.
/// `*data` points into the result and stays valid until the result is
/// freed; `shape` receives 3 entries.
///
/// # Safety
/// `inference` is a live handle; `data` is writable; `shape` holds 3 entries.
#[no_mangle]
pub unsafe extern "C" fn polarapp_inference_output(
    inference: *const PolarappInference,
    which: u32,
    data: *mut *const f64,
    shape: *mut usize,
) -> PolarappStatus {
    guard(|| {
        let r = &handle(inference, "inference")?.0;
        let data = out_ptr(data, "data")?;
        let shape = out_ptr(shape, "shape")?;
        let a = match which {
            w if w == PolarappOutput::Stack as u32 => &r.stack,
            w if w == PolarappOutput::S0 as u32 => &r.s0,
            w if w == PolarappOutput::Dolp as u32 => &r.dolp,
            w if w == PolarappOutput::Aop as u32 => &r.aop,
            w if w == PolarappOutput::Task as u32 => &r.task,
            w => return Err(Fail(PolarappStatus::Config, format!("unknown output selector {w}"))),
        };
        let s = a.shape();
        if s.len() != 3 {
            return Err(Fail(PolarappStatus::Internal, format!("output has shape {s:?}")));
        }
        ptr::copy_nonoverlapping(s.as_ptr(), shape, 3);
        *data = a.data().as_ptr();
        Ok(())
    })
}

/// Releases an inference result. Null is ignored.
///
/// # Safety
/// `inference` is null or came from [`polarapp_model_infer`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn polarapp_inference_free(inference: *mut PolarappInference) {
    if !inference.is_null() {
        drop(Box::from_raw(inference));
    }
}

/// Runs a self-check suite (`"optics"`, `"autodiff"`, `"bilevel"` or
/// `"eit"`). `*passed` reports whether every check held and `*max_value`
/// the largest measured error.
///
/// # Safety
/// `suite` is NUL-terminated; `passed` and `max_value` are writable.
#[no_mangle]
pub unsafe extern "C" fn polarapp_verify(suite: *const c_char, seed: u64, passed: *mut bool, max_value: *mut f64) -> PolarappStatus {
    guard(|| {
        let passed = out_ptr(passed, "passed")?;
        let max_value = out_ptr(max_value, "max_value")?;
        let suite: Suite = text(suite, "suite")?.parse()?;
        let rep = verify::run_suite(suite, &VerifyOptions { seed, pattern: Pattern::default() })?;
        *passed = rep.passed();
        *max_value = rep.max_value();
        Ok(())
    })
}
