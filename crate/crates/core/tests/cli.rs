//! The `segnet` binary end to end.

mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segnet::data::rv1::read_cohort;
use segnet::data::{Modality, SplitManifest};
use segnet::loss::LossKind;
use segnet::optim::AdamConfig;
use segnet::trainer::{ExperimentConfig, Prediction};

fn segnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segnet"))
        .args(args)
        .env("SEG_NUM_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A small cohort plus its 4/1/1 manifest.
fn cohort(dir: &Path, patients: usize) -> (PathBuf, PathBuf) {
    let c = dir.join("cohort");
    let o = segnet(&["phantom", "--out", s(&c), "--patients", &patients.to_string(), "--dims", "4,32,32", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = dir.join("manifest.json");
    let o = segnet(&["split", "--cohort", s(&c), "--fractions", "8/12,2/12,2/12", "--seed", "1", "--out", s(&m)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (c, m)
}

#[test]
fn phantom_is_deterministic_and_force_rewrites_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| vec!["phantom".to_string(), "--out".into(), s(out).into(), "--patients".into(), "3".into(), "--dims".into(), "4,32,32".into()];
    let run = |v: Vec<String>| segnet(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&run(args(&a))), 0);
    assert_eq!(code(&run(args(&b))), 0);
    assert_eq!(tree(&a), tree(&b));
    let first = tree(&a);
    let patients = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(patients, 3);

    let again = run(args(&a));
    assert_eq!(code(&again), 2, "a non-empty directory needs --force");
    let mut forced = args(&a);
    forced.push("--force".into());
    assert_eq!(code(&run(forced)), 0);
    assert_eq!(tree(&a), first);
}

#[test]
fn validate_reports_injected_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c");
    assert_eq!(code(&segnet(&["phantom", "--out", s(&c), "--patients", "3", "--dims", "4,32,32"])), 0);
    let clean = segnet(&["validate", "--cohort", s(&c)]);
    assert_eq!(code(&clean), 0);
    assert!(stdout(&clean).contains("0 finding(s)"));

    let gtv = c.join("P000").join("gtv.u8");
    let mut bytes = fs::read(&gtv).unwrap();
    bytes[5] = 2;
    fs::write(&gtv, bytes).unwrap();
    let o = segnet(&["validate", "--cohort", s(&c)]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("non-binary mask"), "{}", stdout(&o));

    let ct = c.join("P001").join("ct.f32");
    let bytes = fs::read(&ct).unwrap();
    fs::write(&ct, &bytes[..bytes.len() - 3]).unwrap();
    let o = segnet(&["validate", "--cohort", s(&c)]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("size mismatch"), "{}", stdout(&o));
}

#[test]
fn split_of_197_patients_matches_the_published_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c");
    assert_eq!(code(&segnet(&["phantom", "--out", s(&c), "--patients", "197", "--dims", "4,32,32", "--seed", "3"])), 0);
    let m = dir.path().join("m.json");
    let o = segnet(&["split", "--cohort", s(&c), "--fractions", "142/197,15/197,40/197", "--seed", "9", "--out", s(&m)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&m).unwrap();
    let manifest: SplitManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(manifest.sizes(), [142, 15, 40]);
    // parse -> serialize -> parse is the identity.
    let again: SplitManifest = serde_json::from_str(&serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    assert_eq!(again, manifest);

    let bad = segnet(&["split", "--cohort", s(&c), "--fractions", "0.7,0.2,0.2", "--out", s(&m)]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sum to 1"));
}

#[test]
fn help_and_usage_errors() {
    for cmd in ["phantom", "validate", "split", "train", "grid", "eval", "predict", "overlay"] {
        let o = segnet(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd} --help");
        let text = stdout(&o);
        assert!(text.contains("Usage"), "{cmd}");
        for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
            let flag = line.trim_start().split_whitespace().next().unwrap();
            let rest = line.trim_start()[flag.len()..].trim();
            assert!(!rest.is_empty(), "{cmd} {flag} is undocumented");
        }
    }
    assert_eq!(code(&segnet(&["--help"])), 0);
    assert_eq!(code(&segnet(&[])), 1);
    assert_eq!(code(&segnet(&["nonsense"])), 1);
    assert_eq!(code(&segnet(&["validate"])), 1);
}

#[test]
fn eval_of_perfect_predictions_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let (c, m) = cohort(dir.path(), 6);
    let preds = dir.path().join("preds");
    for rec in read_cohort(&c).unwrap() {
        Prediction::from_mask(&rec.patient_id, rec.ground_truth().unwrap())
            .save(&preds.join(&rec.patient_id))
            .unwrap();
    }
    let csv = dir.path().join("perfect.csv");
    let o = segnet(&["eval", "--pred", s(&preds), "--cohort", s(&c), "--split", "test", "--manifest", s(&m), "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let row = stdout(&o).lines().find(|l| l.starts_with("predictions")).unwrap().to_string();
    assert_eq!(row.matches("1.00").count(), 4, "{row}");
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("id,tp,fp,fn,tn,dice,sens,spec,ppv\n"));

    let all = segnet(&["eval", "--pred", s(&preds), "--cohort", s(&c), "--split", "all", "--out", s(&csv)]);
    assert_eq!(code(&all), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 6 + 2);
}

fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn train_predict_overlay_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = cohort(dir.path(), 6);
    let mut exp = ExperimentConfig::desk(Modality::Petct, LossKind::Dice, None, 1, 2);
    exp.adam = AdamConfig::with_learning_rate(1e-3);
    let cfg = dir.path().join("train.json");
    // Relative paths resolve against the config file's directory.
    write_json(&cfg, &serde_json::json!({
        "cohort": "cohort", "manifest": "manifest.json", "out": "run", "experiment": exp,
    }));
    let o = segnet(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains(&format!("config hash {}", exp.hash())));
    let ckpt = dir.path().join("run").join("best.ckpt");
    for f in ["best.ckpt", "history.json", "trial.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }

    let pred = dir.path().join("pred");
    let o = segnet(&["predict", "--checkpoint", s(&ckpt), "--patient", s(&c.join("P000")), "--out", s(&pred)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let p1 = fs::read(pred.join("prob.f32")).unwrap();
    let pred2 = dir.path().join("pred2");
    assert_eq!(code(&segnet(&["predict", "--checkpoint", s(&ckpt), "--patient", s(&c.join("P000")), "--out", s(&pred2)])), 0);
    assert_eq!(fs::read(pred2.join("prob.f32")).unwrap(), p1);

    for (name, magic, channels) in [("o.ppm", "P6", 3), ("o.pgm", "P5", 1)] {
        let out = dir.path().join(name);
        let o = segnet(&["overlay", "--patient", s(&c.join("P000")), "--pred", s(&pred), "--slice", "1", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let img = fs::read(&out).unwrap();
        let header = format!("{magic}\n32 32\n255\n");
        assert!(img.starts_with(header.as_bytes()));
        assert_eq!(img.len(), header.len() + 32 * 32 * channels);
    }
    let o = segnet(&["overlay", "--patient", s(&c.join("P000")), "--pred", s(&pred), "--slice", "9", "--out", s(&dir.path().join("x.ppm"))]);
    assert_eq!(code(&o), 2);

    let csv = dir.path().join("eval.csv");
    let o = segnet(&["eval", "--checkpoint", s(&ckpt), "--cohort", s(&c), "--split", "validation", "--manifest", s(&dir.path().join("manifest.json")), "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PET/CT & $"));
}

#[test]
fn grid_then_eval_gives_three_modality_rows_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (c, m) = cohort(dir.path(), 6);
    let cfg = dir.path().join("grid.json");
    write_json(&cfg, &serde_json::json!({
        "cohort": "cohort", "manifest": "manifest.json", "out": "grid",
        "grid": {
            "modalities": ["ct", "pet", "petct"], "losses": ["dice"], "windows": [null],
            "seeds": [1], "epochs": 1, "adam": {"learning_rate": 1e-3},
        },
    }));
    let first = segnet(&["grid", "--config", s(&cfg)]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("trained 3 cell(s), skipped 0"));
    let second = segnet(&["grid", "--config", s(&cfg)]);
    assert_eq!(code(&second), 0);
    assert!(stdout(&second).contains("trained 0 cell(s), skipped 3"));
    let hashes = |o: &Output| -> Vec<String> {
        stdout(o).lines().filter(|l| l.starts_with("cell")).map(|l| l.split_whitespace().nth(4).unwrap().to_string()).collect()
    };
    assert_eq!(hashes(&first), hashes(&second));
    assert_eq!(hashes(&first).len(), 3);

    let ckpts: Vec<PathBuf> = fs::read_dir(dir.path().join("grid").join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path().join("best.ckpt"))
        .collect();
    let csv = dir.path().join("test.csv");
    let mut args = vec!["eval".to_string()];
    for p in &ckpts {
        args.extend(["--checkpoint".to_string(), s(p).to_string()]);
    }
    args.extend(["--cohort", s(&c), "--split", "test", "--manifest", s(&m), "--out", s(&csv)].map(String::from));
    let o = segnet(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for label in ["CT-only ", "PET-only ", "PET/CT "] {
        assert!(text.lines().any(|l| l.starts_with(label)), "{label} row missing:\n{text}");
    }
    for key in ["ct", "pet", "petct"] {
        assert!(dir.path().join(format!("test.{key}.csv")).is_file());
    }
}

#[test]
fn diverged_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path(), 6);
    let mut exp = ExperimentConfig::desk(Modality::Petct, LossKind::CrossEntropy, None, 1, 3);
    exp.adam = AdamConfig::with_learning_rate(1e30);
    let cfg = dir.path().join("train.json");
    write_json(&cfg, &serde_json::json!({
        "cohort": "cohort", "manifest": "manifest.json", "out": "run", "experiment": exp,
    }));
    let o = segnet(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 3, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_files_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path(), 6);
    let exp = ExperimentConfig::desk(Modality::Ct, LossKind::Dice, None, 1, 0);
    let cfg = dir.path().join("train.json");
    write_json(&cfg, &serde_json::json!({
        "cohort": "cohort", "manifest": "manifest.json", "out": "run", "experiment": exp, "extra": 1,
    }));
    assert_eq!(code(&segnet(&["train", "--config", s(&cfg)])), 2);
}
