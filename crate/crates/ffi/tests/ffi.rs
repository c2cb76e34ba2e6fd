use std::ffi::{CStr, CString};
use std::ptr;

use polarapp_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(polarapp_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(polarapp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut model = ptr::null_mut();
    let s = unsafe { polarapp_model_load(ptr::null(), &mut model) };
    assert_eq!(s, PolarappStatus::NullArgument);
    assert!(last_error().contains("checkpoint"));
    assert!(model.is_null());
    let mut passed = false;
    let s = unsafe { polarapp_verify(c("optics").as_ptr(), 0, &mut passed, ptr::null_mut()) };
    assert_eq!(s, PolarappStatus::NullArgument);
}

#[test]
fn bad_values_map_to_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = c(dir.path().join("d").to_str().unwrap());
    let s = unsafe { polarapp_generate(c("sfp").as_ptr(), 0, 64, 0, out.as_ptr()) };
    assert_eq!(s, PolarappStatus::Config);
    assert!(!last_error().is_empty());
    let s = unsafe { polarapp_generate(c("nope").as_ptr(), 8, 64, 0, out.as_ptr()) };
    assert_eq!(s, PolarappStatus::Config);
    let (mut passed, mut v) = (false, 0.0);
    let s = unsafe { polarapp_verify(c("everything").as_ptr(), 0, &mut passed, &mut v) };
    assert_eq!(s, PolarappStatus::Config);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    let p = c(dir.path().join("absent").to_str().unwrap());
    let s = unsafe { polarapp_model_load(p.as_ptr(), &mut model) };
    assert_ne!(s, PolarappStatus::Ok);
    assert!(model.is_null());
}

#[test]
fn optics_suite_passes_and_clears_error() {
    let (mut passed, mut v) = (false, f64::NAN);
    let s = unsafe { polarapp_verify(c("optics").as_ptr(), 3, &mut passed, &mut v) };
    assert_eq!(s, PolarappStatus::Ok, "{}", last_error());
    assert!(passed);
    assert!(v.is_finite());
    assert_eq!(last_error(), "");
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        polarapp_model_free(ptr::null_mut());
        polarapp_report_free(ptr::null_mut());
        polarapp_inference_free(ptr::null_mut());
        assert_eq!(polarapp_report_scene_count(ptr::null()), 0);
    }
}

#[test]
fn train_evaluate_and_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let s = unsafe { polarapp_generate(c("sfp").as_ptr(), 12, 16, 5, c(data.to_str().unwrap()).as_ptr()) };
    assert_eq!(s, PolarappStatus::Ok, "{}", last_error());

    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"dataset": "data", "output_dir": "out", "train": {"task": "sfp", "seed": 2, "epochs": 1,
        "meta_iters": 1, "batch_size": 2, "lr_inner_d": 1e-3, "lr_inner_t": 1e-3, "lr_ft": 1e-3,
        "lr_d": 1e-3, "lr_t": 1e-3, "lambda_t": 1, "lambda_fa": 1,
        "demosaicker": {"base_channels": 2, "depth": 2, "kernel": 3},
        "task_net": {"base_channels": 2, "depth": 2, "kernel": 3}, "ft_width": 2}}"#,
    )
    .unwrap();
    let s = unsafe { polarapp_train(c(cfg.to_str().unwrap()).as_ptr(), -1, false) };
    assert_eq!(s, PolarappStatus::Ok, "{}", last_error());

    let ckpt = dir.path().join("out/checkpoint_001");
    let mut model = ptr::null_mut();
    let s = unsafe { polarapp_model_load(c(ckpt.to_str().unwrap()).as_ptr(), &mut model) };
    assert_eq!(s, PolarappStatus::Ok, "{}", last_error());

    let mut report = ptr::null_mut();
    let s = unsafe {
        polarapp_model_evaluate(
            model,
            c(data.to_str().unwrap()).as_ptr(),
            c("test").as_ptr(),
            c("without_A").as_ptr(),
            c(dir.path().join("eval").to_str().unwrap()).as_ptr(),
            &mut report,
        )
    };
    assert_eq!(s, PolarappStatus::Ok, "{}", last_error());
    assert!(unsafe { polarapp_report_scene_count(report) } > 0);
    let mut mae = f64::NAN;
    assert_eq!(unsafe { polarapp_report_metric(report, c("mae_deg").as_ptr(), &mut mae) }, PolarappStatus::Ok);
    assert!((0.0..=180.0).contains(&mae));
    let s = unsafe { polarapp_report_metric(report, c("no_such_metric").as_ptr(), &mut mae) };
    assert_eq!(s, PolarappStatus::Config);
    unsafe { polarapp_report_free(report) };

    let stack: Vec<f64> = (0..12 * 8 * 8).map(|i| 0.2 + 0.3 * ((i % 13) as f64 / 13.0)).collect();
    let shape = [12usize, 8, 8];
    let mut inf = ptr::null_mut();
    let s = unsafe { polarapp_model_infer(model, stack.as_ptr(), shape.as_ptr(), 3, &mut inf) };
    assert_eq!(s, PolarappStatus::Ok, "{}", last_error());
    for (which, channels) in [(PolarappOutput::Stack, 12), (PolarappOutput::S0, 3), (PolarappOutput::Task, 3)] {
        let mut data = ptr::null();
        let mut out_shape = [0usize; 3];
        let s = unsafe { polarapp_inference_output(inf, which as u32, &mut data, out_shape.as_mut_ptr()) };
        assert_eq!(s, PolarappStatus::Ok, "{}", last_error());
        assert_eq!(out_shape, [channels, 16, 16]);
        let vals = unsafe { std::slice::from_raw_parts(data, channels * 256) };
        assert!(vals.iter().all(|v| v.is_finite()));
    }
    let (mut data, mut out_shape) = (ptr::null(), [0usize; 3]);
    let s = unsafe { polarapp_inference_output(inf, 99, &mut data, out_shape.as_mut_ptr()) };
    assert_eq!(s, PolarappStatus::Config);
    unsafe { polarapp_inference_free(inf) };

    let bad = [5usize, 8, 8];
    let mut inf = ptr::null_mut();
    let s = unsafe { polarapp_model_infer(model, stack.as_ptr(), bad.as_ptr(), 3, &mut inf) };
    assert_ne!(s, PolarappStatus::Ok);
    assert!(inf.is_null());
    unsafe { polarapp_model_free(model) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/polarapp.h")).unwrap();
    for name in [
        "polarapp_last_error",
        "polarapp_version",
        "polarapp_generate",
        "polarapp_train",
        "polarapp_model_load",
        "polarapp_model_free",
        "polarapp_model_evaluate",
        "polarapp_report_scene_count",
        "polarapp_report_metric",
        "polarapp_report_free",
        "polarapp_model_infer",
        "polarapp_inference_output",
        "polarapp_inference_free",
        "polarapp_verify",
        "typedef struct PolarappModel PolarappModel",
        "POLARAPP_STATUS_OK = 0",
        "POLARAPP_OUTPUT_TASK = 4",
    ] {
        assert!(header.contains(name), "header lacks `{name}`");
    }
}
