use std::ffi::CString;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use segnet::data::{generate_phantom_cohort, rv1, Modality};
use segnet::loss::LossKind;
use segnet::trainer::{infer_probabilities, train, ExperimentConfig, TrainOptions};
use segnet_ffi::*;

fn checkpoint(dir: &Path) -> (PathBuf, ExperimentConfig) {
    let cohort = generate_phantom_cohort(3, [4, 32, 32], 5).unwrap();
    let mut config = ExperimentConfig::desk(Modality::Petct, LossKind::Dice, None, 11, 1);
    config.batch_size = 4;
    let path = dir.join("m.ckpt");
    let options = TrainOptions {
        checkpoint_path: Some(path.clone()),
    };
    train(&config, &cohort[..2], &cohort[2..], &options).unwrap();
    (path, config)
}

#[test]
fn predict_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, config) = checkpoint(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model: *mut SegModel = ptr::null_mut();
    assert_eq!(unsafe { seg_model_load(cpath.as_ptr(), &mut model) }, SegStatus::Ok);
    assert_eq!(unsafe { seg_model_in_channels(model) }, 2);
    assert_eq!(unsafe { seg_model_size_multiple(model) }, 4);

    let rec = &generate_phantom_cohort(3, [4, 32, 32], 5).unwrap()[0];
    let samples = config.slices(std::slice::from_ref(rec)).unwrap();
    let input: Vec<f32> = samples.iter().flat_map(|s| s.channels.data().to_vec()).collect();
    let mut out = vec![0.0f32; 4 * 32 * 32];
    let status = unsafe { seg_model_predict(model, input.as_ptr(), 4, 2, 32, 32, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, SegStatus::Ok);

    let mut ck = segnet::trainer::Checkpoint::load(&path).unwrap();
    let expected = infer_probabilities(&mut ck.model, &samples, 4).unwrap();
    assert_eq!(
        out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        expected.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    let mut small = vec![0.0f32; 10];
    let status = unsafe { seg_model_predict(model, input.as_ptr(), 4, 2, 32, 32, small.as_mut_ptr(), small.len()) };
    assert_eq!(status, SegStatus::BufferTooSmall);
    let status = unsafe { seg_model_predict(model, input.as_ptr(), 1, 2, 30, 30, out.as_mut_ptr(), out.len()) };
    assert_eq!(status, SegStatus::InvalidArgument);
    unsafe { seg_model_free(model) };
}

#[test]
fn phantom_writer_produces_a_valid_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cdir = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { seg_phantom_write(cdir.as_ptr(), 3, 4, 32, 32, 1) }, SegStatus::Ok);
    assert!(rv1::validate_cohort(dir.path()).is_empty());
    assert_eq!(unsafe { seg_phantom_write(cdir.as_ptr(), 2, 4, 32, 32, 1) }, SegStatus::InvalidArgument);
}

#[test]
fn confusion_and_metrics() {
    let pred = [1u8, 1, 0, 0, 1];
    let truth = [1u8, 0, 1, 0, 1];
    let mut c = SegCounts::default();
    assert_eq!(unsafe { seg_confusion(pred.as_ptr(), truth.as_ptr(), 5, &mut c) }, SegStatus::Ok);
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 1));
    let mut m = SegMetrics::default();
    assert_eq!(unsafe { seg_metrics(&c, &mut m) }, SegStatus::Ok);
    assert_eq!(m.dice, 4.0 / 6.0);
    let bad = [2u8];
    assert_eq!(unsafe { seg_confusion(bad.as_ptr(), truth.as_ptr(), 1, &mut c) }, SegStatus::InvalidArgument);
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include <string.h>
#include "segnet.h"

int main(int argc, char **argv) {
    SegModel *model = NULL;
    char msg[256];
    if (seg_model_load("/nonexistent.ckpt", &model) != SEG_STATUS_IO) return 10;
    if (seg_last_error_message(msg, sizeof msg) == 0) return 11;
    if (seg_model_load(argv[1], &model) != SEG_STATUS_OK) return 12;
    if (seg_model_in_channels(model) != 2) return 13;
    float input[2 * 32 * 32];
    float out[32 * 32];
    for (int i = 0; i < 2 * 32 * 32; i++) input[i] = (float)(i % 7) / 7.0f;
    if (seg_model_predict(model, input, 1, 2, 32, 32, out, 32 * 32) != SEG_STATUS_OK) return 14;
    for (int i = 0; i < 32 * 32; i++) if (!(out[i] >= 0.0f && out[i] <= 1.0f)) return 15;
    seg_model_free(model);
    float hu[3] = {-1000.0f, 70.0f, 1000.0f}, w[3];
    if (seg_window_ct(hu, 3, 70.0, 200.0, w) != SEG_STATUS_OK) return 16;
    if (w[0] != 0.0f || w[1] != 0.5f || w[2] != 1.0f) return 17;
    SegCounts c = {3, 1, 1, 95};
    SegMetrics m;
    if (seg_metrics(&c, &m) != SEG_STATUS_OK || fabs(m.dice - 0.75) > 1e-12) return 18;
    printf("%s\n", seg_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("cc not available; skipping");
        return;
    }
    // Test binaries and the freshly built library both live in `deps`.
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().join("libsegnet_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");

    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = checkpoint(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&bin).arg(&ckpt).output().unwrap();
    assert!(run.status.success(), "C program exited with {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
