use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use metasched_ffi::*;

fn last_error() -> String {
    let p = ms_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn model(hidden: &[usize]) -> *mut MsModel {
    let mut m = ptr::null_mut();
    let st = unsafe { ms_model_new(3, hidden.as_ptr(), hidden.len(), 2, MsActivation::Tanh, 7, &mut m) };
    assert_eq!(st, MsStatus::Ok);
    m
}

#[test]
fn model_round_trips_parameters() {
    let m = model(&[4]);
    let mut n = 0;
    assert_eq!(unsafe { ms_model_param_count(m, &mut n) }, MsStatus::Ok);
    assert_eq!(n, 3 * 4 + 4 + 4 * 2 + 2);
    let mut buf = vec![0.0; n];
    assert_eq!(unsafe { ms_model_get_params(m, buf.as_mut_ptr(), n) }, MsStatus::Ok);
    let bumped: Vec<f64> = buf.iter().map(|v| v + 0.5).collect();
    assert_eq!(unsafe { ms_model_set_params(m, bumped.as_ptr(), n) }, MsStatus::Ok);
    let mut back = vec![0.0; n];
    assert_eq!(unsafe { ms_model_get_params(m, back.as_mut_ptr(), n) }, MsStatus::Ok);
    assert_eq!(back, bumped);

    assert_eq!(unsafe { ms_model_get_params(m, back.as_mut_ptr(), n - 1) }, MsStatus::Invalid);
    assert!(last_error().contains("buffer"));
    let bad = vec![f64::NAN; n];
    assert_ne!(unsafe { ms_model_set_params(m, bad.as_ptr(), n) }, MsStatus::Ok);
    unsafe { ms_model_free(m) };
}

#[test]
fn forward_matches_library() {
    let m = model(&[5]);
    let x = [0.1, -0.2, 0.3, 1.0, 0.5, -1.5];
    let mut z = [0.0; 4];
    assert_eq!(unsafe { ms_model_forward(m, x.as_ptr(), 2, 3, z.as_mut_ptr(), 4) }, MsStatus::Ok);

    let expected = metasched::nn::forward(
        &metasched::ParamVector::init(
            metasched::nn::mlp_manifest(3, &[5], 2, metasched::Activation::Tanh),
            7,
        )
        .unwrap(),
        &metasched::Matrix::from_vec(2, 3, x.to_vec()).unwrap(),
    )
    .unwrap();
    assert_eq!(z.as_slice(), expected.as_slice());

    assert_eq!(unsafe { ms_model_forward(m, x.as_ptr(), 2, 4, z.as_mut_ptr(), 4) }, MsStatus::Invalid);
    unsafe { ms_model_free(m) };
}

#[test]
fn null_handles_are_reported() {
    let mut n = 0;
    assert_eq!(unsafe { ms_model_param_count(ptr::null(), &mut n) }, MsStatus::NullPointer);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { ms_run_train(ptr::null_mut()) }, MsStatus::NullPointer);
    unsafe {
        ms_model_free(ptr::null_mut());
        ms_run_free(ptr::null_mut());
        ms_string_free(ptr::null_mut());
    }
}

#[test]
fn instance_metagrad_matches_finite_differences() {
    let m = model(&[4]);
    let tx = [0.5, -1.0, 0.2, 1.2, 0.3, -0.7, -0.4, 0.9, 1.1];
    let tl = [0usize, 1, 1];
    let mx = [0.1, 0.2, -0.3, -1.0, 0.4, 0.8];
    let ml = [1usize, 0];
    let (lr, wd) = (0.3, 1e-3);
    let mut g = [0.0; 3];
    let st = unsafe {
        ms_instance_metagrad(m, tx.as_ptr(), tl.as_ptr(), 3, mx.as_ptr(), ml.as_ptr(), 2, lr, wd, g.as_mut_ptr())
    };
    assert_eq!(st, MsStatus::Ok);

    // oracle: meta loss after one weighted step, differentiated numerically
    let mut n = 0;
    unsafe { ms_model_param_count(m, &mut n) };
    let mut theta = vec![0.0; n];
    unsafe { ms_model_get_params(m, theta.as_mut_ptr(), n) };
    let params = metasched::ParamVector::init(
        metasched::nn::mlp_manifest(3, &[4], 2, metasched::Activation::Tanh),
        7,
    )
    .unwrap();
    let train = metasched::Batch::new(metasched::Matrix::from_vec(3, 3, tx.to_vec()).unwrap(), tl.to_vec(), vec![0, 1, 2]).unwrap();
    let meta_x = metasched::Matrix::from_vec(2, 3, mx.to_vec()).unwrap();
    let loss_at = |w: [f64; 3]| {
        let mut dps = metasched::DataParamState::new(3, 2, metasched::WeightMode::Instance, wd);
        dps.w_inst = w.to_vec();
        let rolled = metasched::meta::rollout_one_step(&params, &train, &dps, lr).unwrap();
        metasched::nn::mean_loss(&rolled, &meta_x, &ml).unwrap()
    };
    let h = 1e-5;
    for i in 0..3 {
        let mut plus = [1.0; 3];
        plus[i] += h;
        let mut minus = [1.0; 3];
        minus[i] -= h;
        let fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
        assert!((fd - g[i]).abs() <= 1e-8 + 1e-5 * fd.abs(), "{i}: {} vs {fd}", g[i]);
    }
    unsafe { ms_model_free(m) };
}

#[test]
fn gradcheck_reports_json() {
    let mut pass = 0;
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ms_gradcheck(10, 1, &mut pass, &mut json) }, MsStatus::Ok);
    assert_eq!(pass, 1);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { ms_string_free(json) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 5);
}

#[test]
fn run_trains_and_reports_metrics() {
    let cfg = CString::new(
        "data.classes = 3\ndata.dims = 4\ndata.train_per_class = 30\ndata.meta_per_class = 5\n\
         data.test_per_class = 10\nmodel.widths = 8\ntrain.epochs = 2\nmeta.mode = instance\n",
    )
    .unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { ms_run_new(cfg.as_ptr(), &mut run) }, MsStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ms_run_metrics_json(run, &mut json) }, MsStatus::Invalid);
    assert_eq!(unsafe { ms_run_train(run) }, MsStatus::Ok);
    assert_eq!(unsafe { ms_run_metrics_json(run, &mut json) }, MsStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { ms_string_free(json) };
    assert_eq!(text.lines().count(), 2);
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(last["test_acc"].as_f64().unwrap() > 0.0);

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ms_run_model(run, &mut m) }, MsStatus::Ok);
    let mut n = 0;
    unsafe { ms_model_param_count(m, &mut n) };
    assert_eq!(n, 4 * 8 + 8 + 8 * 3 + 3);
    unsafe {
        ms_model_free(m);
        ms_run_free(run);
    }
}

#[test]
fn bad_config_and_divergence_map_to_status() {
    let mut run = ptr::null_mut();
    let bad = CString::new("train.lr = -1\n").unwrap();
    assert_eq!(unsafe { ms_run_new(bad.as_ptr(), &mut run) }, MsStatus::Invalid);
    assert!(last_error().contains("lr") || last_error().contains("rate"));

    let wild = CString::new(
        "data.classes = 3\ndata.dims = 4\ndata.train_per_class = 30\ndata.meta_per_class = 5\n\
         data.test_per_class = 10\ntrain.lr = 1e200\ntrain.epochs = 2\nmeta.mode = none\n",
    )
    .unwrap();
    assert_eq!(unsafe { ms_run_new(wild.as_ptr(), &mut run) }, MsStatus::Ok);
    assert_eq!(unsafe { ms_run_train(run) }, MsStatus::Numeric);
    assert!(last_error().contains("diverged"), "{}", last_error());
    unsafe { ms_run_free(run) };

    let missing = CString::new("data.path = /nonexistent/data.csv\n").unwrap();
    assert_eq!(unsafe { ms_run_new(missing.as_ptr(), &mut run) }, MsStatus::Ok);
    assert_eq!(unsafe { ms_run_train(run) }, MsStatus::Io);
    unsafe { ms_run_free(run) };
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include "metasched.h"

int main(void) {
    size_t hidden[1] = {4};
    MsModel *m = NULL;
    if (ms_model_new(2, hidden, 1, 3, MS_ACTIVATION_RELU, 1, &m) != MS_STATUS_OK) return 10;
    size_t n = 0;
    if (ms_model_param_count(m, &n) != MS_STATUS_OK || n != 2 * 4 + 4 + 4 * 3 + 3) return 11;
    double x[2] = {0.5, -0.25};
    double z[3];
    if (ms_model_forward(m, x, 1, 2, z, 3) != MS_STATUS_OK) return 12;
    if (ms_model_forward(m, x, 1, 2, z, 2) != MS_STATUS_INVALID) return 13;
    if (ms_last_error() == NULL) return 14;
    ms_model_free(m);
    int pass = 0;
    if (ms_gradcheck(5, 0, &pass, NULL) != MS_STATUS_OK || !pass) return 15;
    printf("ok\n");
    return 0;
}
"#;

/// Directory holding the built static library, next to the test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let lib = artifact_dir().join("libmetasched_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let exe = tmp.path().join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
