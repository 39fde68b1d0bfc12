//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 diverged training.

mod overlay;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use segnet::data::rv1::{self, read_json, write_json};
use segnet::data::{
    generate_phantom_cohort, lesion_stats, stratified_split, window_ct, PatientRecord, SplitFractions,
    SplitManifest, SplitName, WindowSpec,
};
use segnet::metrics::{aggregate, evaluate_patient, format_latex, format_table, write_csv, PatientMetrics, ReportRow};
use segnet::trainer::{
    evaluate_records, predict, resolve_path, run_grid, train, worker_count, Checkpoint, ExperimentConfig, GridSpec,
    Prediction, TrainOptions,
};
use segnet::{Error, Result};

use overlay::{render, Raster};

#[derive(Debug, Parser)]
#[command(name = "segnet", version, about = "U-Net tumour segmentation on CT/PET volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic PET/CT cohort in RV1 layout.
    Phantom(PhantomArgs),
    /// Check the structural invariants of an RV1 cohort.
    Validate(ValidateArgs),
    /// Assign patients to train/validation/test, stratified by T-stage.
    Split(SplitArgs),
    /// Train one configuration.
    Train(ConfigArgs),
    /// Train a hyperparameter grid, select per modality, evaluate on test.
    Grid(ConfigArgs),
    /// Per-patient metrics of checkpoints or saved predictions.
    Eval(EvalArgs),
    /// Predict one patient volume.
    Predict(PredictArgs),
    /// Render a slice with truth and predicted contours.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Output cohort directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of patients (at least 3).
    #[arg(long, default_value_t = 12)]
    patients: usize,
    /// Volume size as D,H,W; H and W must be multiples of 16.
    #[arg(long, default_value = "24,64,64", value_parser = parse_dims)]
    dims: [usize; 3],
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Cohort directory.
    #[arg(long)]
    cohort: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Cohort directory.
    #[arg(long)]
    cohort: PathBuf,
    /// Train, validation and test fractions; each may be a ratio such as 142/197.
    #[arg(long, value_parser = parse_fractions)]
    fractions: [f64; 3],
    /// Shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration; relative paths inside resolve against its directory.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; repeat for several models.
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    checkpoint: Vec<PathBuf>,
    /// Directory of saved predictions, one subdirectory per patient id.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Cohort directory.
    #[arg(long)]
    cohort: PathBuf,
    /// Split to evaluate: train, validation, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Split manifest; required unless the split is `all`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Per-patient CSV; with several checkpoints the modality key is added to the name.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Patient directory (RV1).
    #[arg(long)]
    patient: PathBuf,
    /// Output directory for prediction.json, prob.f32 and mask.u8.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    /// Patient directory (RV1).
    #[arg(long)]
    patient: PathBuf,
    /// Prediction directory written by `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Transversal slice index.
    #[arg(long)]
    slice: usize,
    /// Output image; `.pgm` gives grayscale, anything else colour PPM.
    #[arg(long)]
    out: PathBuf,
    /// Background image.
    #[arg(long, default_value = "ct", value_parser = ["ct", "pet"])]
    background: String,
    /// CT window as CENTER,WIDTH in HU.
    #[arg(long, default_value = "70,200", value_parser = parse_window)]
    window: WindowSpec,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| "expected D,H,W".to_string())
}

fn parse_ratio(p: &str) -> std::result::Result<f64, String> {
    let p = p.trim();
    match p.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
            Ok(a / b)
        }
        None => p.parse().map_err(|e| format!("{p:?}: {e}")),
    }
}

fn parse_fractions(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(parse_ratio).collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three fractions a,b,c".to_string())
}

fn parse_window(s: &str) -> std::result::Result<WindowSpec, String> {
    let (c, w) = s.split_once(',').ok_or("expected CENTER,WIDTH")?;
    let c: f64 = c.trim().parse().map_err(|e| format!("{c:?}: {e}"))?;
    let w: f64 = w.trim().parse().map_err(|e| format!("{w:?}: {e}"))?;
    WindowSpec::new(c, w).map_err(|e| e.to_string())
}

/// `train --config` document.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    cohort: PathBuf,
    manifest: PathBuf,
    out: PathBuf,
    experiment: ExperimentConfig,
}

/// `grid --config` document.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    cohort: PathBuf,
    manifest: PathBuf,
    out: PathBuf,
    grid: GridSpec,
    /// Parallel cells; `SEG_NUM_WORKERS` or the core count when absent.
    #[serde(default)]
    workers: Option<usize>,
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Overlay(a) => cmd_overlay(a),
    }
}

fn cmd_phantom(a: PhantomArgs) -> Result<ExitCode> {
    if let Ok(mut entries) = fs::read_dir(&a.out) {
        if entries.next().is_some() && !a.force {
            return Err(Error::Data(format!(
                "{} exists and is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
    }
    let cohort = generate_phantom_cohort(a.patients, a.dims, a.seed)?;
    rv1::write_cohort(&a.out, &cohort)?;
    println!("patient  t_stage  gtv_voxels  nodes  positive_fraction");
    for rec in &cohort {
        let s = lesion_stats(rec)?;
        println!(
            "{:<8} {:>7}  {:>10}  {:>5}  {:>17.5}",
            s.patient_id, s.t_stage, s.gtv_voxels, s.node_count, s.positive_fraction
        );
    }
    println!("wrote {} patients to {}", cohort.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(a: ValidateArgs) -> Result<ExitCode> {
    let findings = rv1::validate_cohort(&a.cohort);
    for f in &findings {
        println!("{f}");
    }
    println!("{} finding(s)", findings.len());
    Ok(if findings.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_split(a: SplitArgs) -> Result<ExitCode> {
    let [train, validation, test] = a.fractions;
    let fractions = SplitFractions::new(train, validation, test)?;
    let index = rv1::read_index(&a.cohort)?;
    let manifest = stratified_split(&index.patients, fractions, a.seed)?;
    write_json(&a.out, &manifest)?;
    let [n_train, n_val, n_test] = manifest.sizes();
    println!("train {n_train}  validation {n_val}  test {n_test}");
    Ok(ExitCode::SUCCESS)
}

fn load_splits(cohort: &Path, manifest: &Path) -> Result<(SplitManifest, Vec<PatientRecord>)> {
    let records = rv1::read_cohort(cohort)?;
    let manifest: SplitManifest = read_json(manifest)?;
    Ok((manifest, records))
}

fn cmd_train(a: ConfigArgs) -> Result<ExitCode> {
    let file: TrainFile = read_json(&a.config)?;
    let base = config_dir(&a.config);
    let out = resolve_path(&base, &file.out);
    let (manifest, records) = load_splits(&resolve_path(&base, &file.cohort), &resolve_path(&base, &file.manifest))?;
    let config = file.experiment;
    config.validate()?;
    println!("config hash {}", config.hash());
    println!("{}", config.label());
    let train_set = manifest.select(SplitName::Train, &records)?;
    let val_set = manifest.select(SplitName::Validation, &records)?;
    let options = TrainOptions {
        checkpoint_path: Some(out.join("best.ckpt")),
    };
    let outcome = train(&config, &train_set, &val_set, &options)?;
    for e in &outcome.history {
        let loss = e.train_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
        let dice = e.validation_dice.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        println!("epoch {:>4}  loss {loss:>8}  validation dice {dice:>6}", e.epoch);
    }
    write_json(&out.join("history.json"), &outcome.history)?;
    write_json(&out.join("trial.json"), &outcome.result)?;
    println!(
        "best validation dice {:.4} at epoch {}; checkpoint {}",
        outcome.result.best_validation_dice,
        outcome.result.epoch_of_best,
        out.join("best.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_grid(a: ConfigArgs) -> Result<ExitCode> {
    let file: GridFile = read_json(&a.config)?;
    let base = config_dir(&a.config);
    let out = resolve_path(&base, &file.out);
    let (manifest, records) = load_splits(&resolve_path(&base, &file.cohort), &resolve_path(&base, &file.manifest))?;
    let cells = file.grid.cells()?;
    for (i, c) in cells.iter().enumerate() {
        println!("cell {:>3}/{}  config hash {}  {}", i + 1, cells.len(), c.hash(), c.label());
    }
    let outcome = run_grid(
        &file.grid,
        &manifest.select(SplitName::Train, &records)?,
        &manifest.select(SplitName::Validation, &records)?,
        &manifest.select(SplitName::Test, &records)?,
        &out,
        worker_count(file.workers),
    )?;
    println!("trained {} cell(s), skipped {} completed cell(s)", outcome.trained, outcome.skipped);
    for s in &outcome.selections {
        println!(
            "selected {}: {} (validation dice {:.4})",
            s.modality.label(),
            s.config.label(),
            s.validation_dice
        );
    }
    print!("{}", outcome.table());
    Ok(ExitCode::SUCCESS)
}

fn eval_records(a: &EvalArgs) -> Result<Vec<PatientRecord>> {
    let records = rv1::read_cohort(&a.cohort)?;
    if a.split == "all" {
        return Ok(records);
    }
    let split = SplitName::parse(&a.split)?;
    let path = a
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--manifest is required for a named split".into()))?;
    let manifest: SplitManifest = read_json(path)?;
    manifest.select(split, &records)
}

fn with_key(out: &Path, key: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{key}.csv"))
}

fn write_metrics(path: &Path, per: &[PatientMetrics]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(f, per)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let records = eval_records(&a)?;
    let mut rows = Vec::new();
    if let Some(pred_dir) = &a.pred {
        let per = records
            .iter()
            .map(|rec| {
                let pred = Prediction::load(&pred_dir.join(&rec.patient_id))?;
                evaluate_patient(&rec.patient_id, &pred.mask, &rec.ground_truth()?)
            })
            .collect::<Result<Vec<_>>>()?;
        write_metrics(&a.out, &per)?;
        rows.push(ReportRow {
            label: "predictions".into(),
            summary: aggregate(&per)?,
        });
    } else {
        let multiple = a.checkpoint.len() > 1;
        for path in &a.checkpoint {
            let mut ck = Checkpoint::load(path)?;
            let per = evaluate_records(&mut ck.model, &ck.config, &records)?;
            let modality = ck.config.modality;
            let out = if multiple { with_key(&a.out, modality.key()) } else { a.out.clone() };
            write_metrics(&out, &per)?;
            let mut label = modality.label().to_string();
            if rows.iter().any(|r: &ReportRow| r.label == label) {
                label = ck.config.label();
            }
            rows.push(ReportRow {
                label,
                summary: aggregate(&per)?,
            });
        }
    }
    print!("{}", format_table(&rows));
    print!("{}", format_latex(&rows));
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let rec = rv1::read_patient(&a.patient)?;
    let pred = predict(&mut ck.model, &ck.config, &rec)?;
    pred.save(&a.out)?;
    println!(
        "{}: {} of {} voxels predicted positive",
        pred.patient_id,
        pred.mask.count_positive(),
        pred.mask.data().len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_overlay(a: OverlayArgs) -> Result<ExitCode> {
    let rec = rv1::read_patient(&a.patient)?;
    let pred = Prediction::load(&a.pred)?;
    if pred.mask.dims() != rec.dims() {
        return Err(Error::shape("overlay", &pred.mask.dims(), &rec.dims()));
    }
    let [d, h, w] = rec.dims();
    if a.slice >= d {
        return Err(Error::InvalidArgument(format!("slice {} is outside 0..{d}", a.slice)));
    }
    let background = match a.background.as_str() {
        "pet" => {
            let plane = rec.pet.slice(a.slice);
            let max = plane.iter().copied().fold(0.0f32, f32::max);
            plane.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect()
        }
        _ => window_ct(rec.ct.slice(a.slice), a.window)?,
    };
    let truth = rec.ground_truth()?;
    let raster = match a.out.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pgm") => Raster::Pgm,
        _ => Raster::Ppm,
    };
    let image = render(&background, truth.slice(a.slice), pred.mask.slice(a.slice), h, w, raster);
    fs::write(&a.out, image).map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {}x{} overlay of slice {} to {}", w, h, a.slice, a.out.display());
    Ok(ExitCode::SUCCESS)
}
