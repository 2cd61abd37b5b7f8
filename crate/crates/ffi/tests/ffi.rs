use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use linequal::classifier::{BaselineModel, FeatureConfig};
use linequal_ffi::*;

fn biased_model(dir: &Path) {
    let mut m = BaselineModel::zeros(FeatureConfig {
        dim: 64,
        ..FeatureConfig::default()
    });
    m.params.bias[0] = 2.0;
    m.save(dir, None).unwrap();
}

fn last_error() -> String {
    let p = lq_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    biased_model(dir.path());
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { lq_model_load(path.as_ptr(), &mut model) }, LqStatus::Ok);
    assert!(!model.is_null());

    let text = CString::new("Home | About | Contact").unwrap();
    let mut probs = [0.0f64; LQ_NUM_CATEGORIES];
    assert_eq!(
        unsafe { lq_model_predict(model, text.as_ptr(), probs.as_mut_ptr()) },
        LqStatus::Ok
    );
    let e2 = 2f64.exp();
    assert!((probs[0] - e2 / (e2 + 8.0)).abs() < 1e-12);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut q = 0.0;
    assert_eq!(
        unsafe { lq_model_quality_score(model, ptr::null(), text.as_ptr(), &mut q) },
        LqStatus::Ok
    );
    assert_eq!(q, probs[0]);
    let platt = LqPlattParams { a: 4.0, b: -2.0 };
    assert_eq!(
        unsafe { lq_model_quality_score(model, &platt, text.as_ptr(), &mut q) },
        LqStatus::Ok
    );
    assert!((q - 1.0 / (1.0 + (-(4.0 * probs[0] - 2.0)).exp())).abs() < 1e-12);
    unsafe { lq_model_free(model) };
    unsafe { lq_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_report_status_and_message() {
    let missing = CString::new("/nonexistent/model").unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { lq_model_load(missing.as_ptr(), &mut model) };
    assert_eq!(status, LqStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("nonexistent"));

    assert_eq!(unsafe { lq_model_load(ptr::null(), &mut model) }, LqStatus::NullPointer);
    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { lq_model_load(bad.as_ptr().cast(), &mut model) },
        LqStatus::InvalidUtf8
    );
}

#[test]
fn segmentation_list() {
    let text = "a".repeat(450);
    let c = CString::new(text.clone()).unwrap();
    let mut list = ptr::null_mut();
    assert_eq!(unsafe { lq_segment_line(c.as_ptr(), 200, &mut list) }, LqStatus::Ok);
    let n = unsafe { lq_string_list_len(list) };
    assert_eq!(n, 3);
    let joined: String = (0..n)
        .map(|i| unsafe { CStr::from_ptr(lq_string_list_get(list, i)) }.to_str().unwrap().to_string())
        .collect();
    assert_eq!(joined, text);
    assert!(unsafe { lq_string_list_get(list, n) }.is_null());
    unsafe { lq_string_list_free(list) };
    assert_eq!(
        unsafe { lq_segment_line(c.as_ptr(), 0, &mut list) },
        LqStatus::InvalidArgument
    );
}

#[test]
fn kappa_and_platt() {
    let owned: Vec<CString> = ["C", "C", "N", "N", "C", "N", "N", "N"]
        .iter()
        .map(|s| CString::new(*s).unwrap())
        .collect();
    let ptrs: Vec<_> = owned.iter().map(|s| s.as_ptr()).collect();
    let mut k = f64::NAN;
    assert_eq!(
        unsafe { lq_cohens_kappa(ptrs.as_ptr(), ptrs[4..].as_ptr(), 4, &mut k) },
        LqStatus::Ok
    );
    assert_eq!(k, 0.5);
    assert_eq!(
        unsafe { lq_cohens_kappa(ptrs.as_ptr(), ptrs.as_ptr(), 0, &mut k) },
        LqStatus::InvalidArgument
    );

    assert_eq!(lq_platt_apply(LqPlattParams { a: 1.0, b: 0.0 }, 0.0), 0.5);
    let scores: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
    let labels: Vec<u8> = scores.iter().map(|s| u8::from(*s > 0.5)).collect();
    let mut p = LqPlattParams { a: 0.0, b: 0.0 };
    assert_eq!(
        unsafe { lq_platt_fit(scores.as_ptr(), labels.as_ptr(), scores.len(), &mut p) },
        LqStatus::Ok
    );
    assert!(p.a > 10.0, "{p:?}");
    assert_eq!(
        unsafe { lq_platt_fit(scores.as_ptr(), labels.as_ptr(), 3, &mut p) },
        LqStatus::InvalidArgument
    );
}

#[test]
fn category_names() {
    let name = unsafe { CStr::from_ptr(lq_category_name(5)) }.to_str().unwrap();
    assert_eq!(name, "Navigation & Interface Elements");
    let c = CString::new(name).unwrap();
    assert_eq!(unsafe { lq_category_index(c.as_ptr()) }, 5);
    assert!(lq_category_name(LQ_NUM_CATEGORIES).is_null());
    let v = unsafe { CStr::from_ptr(lq_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().to_path_buf()
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "linequal.h"

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    LqModel *model = NULL;
    if (lq_model_load(argv[1], &model) != LQ_STATUS_OK) {
        fprintf(stderr, "%s\n", lq_last_error_message());
        return 1;
    }
    double probs[LQ_NUM_CATEGORIES];
    if (lq_model_predict(model, "Click here to subscribe", probs) != LQ_STATUS_OK) return 1;
    double sum = 0;
    for (int i = 0; i < LQ_NUM_CATEGORIES; i++) sum += probs[i];
    lq_model_free(model);

    LqStringList *list = NULL;
    char line[451];
    memset(line, 'x', 450);
    line[450] = 0;
    if (lq_segment_line(line, 200, &list) != LQ_STATUS_OK) return 1;
    size_t n = lq_string_list_len(list);
    lq_string_list_free(list);

    const char *a[] = {"C", "C", "N", "N"};
    const char *b[] = {"C", "N", "N", "N"};
    double kappa = 0;
    if (lq_cohens_kappa(a, b, 4, &kappa) != LQ_STATUS_OK) return 1;

    LqModel *missing = NULL;
    LqStatus st = lq_model_load("/nonexistent", &missing);

    printf("clean=%.6f sum=%.6f segments=%zu kappa=%.3f missing=%d\n", probs[0], sum, n, kappa, (int)st);
    return 0;
}
"#;

#[test]
fn c_program_links_against_header() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let libdir = artifact_dir();
    assert!(
        libdir.join("liblinequal_ffi.so").exists() || libdir.join("liblinequal_ffi.a").exists(),
        "no library artifact in {}",
        libdir.display()
    );
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("smoke.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = work.path().join("smoke");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&libdir)
        .arg(format!("-Wl,-rpath,{}", libdir.display()))
        .arg("-llinequal_ffi")
        .arg("-o")
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));

    let model = work.path().join("model");
    biased_model(&model);
    let run = Command::new(&bin).arg(&model).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    let e2 = 2f64.exp();
    let expected = format!(
        "clean={:.6} sum=1.000000 segments=3 kappa=0.500 missing={}\n",
        e2 / (e2 + 8.0),
        LqStatus::Io as i32
    );
    assert_eq!(stdout, expected);
}
