//! Hyperparameter grid: resumable training of every cell, per-modality
//! selection by validation Dice, one test evaluation per selected model.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, PatientRecord, WindowSpec};
use crate::error::{Error, Result};
use crate::layers::UNetSpec;
use crate::loss::LossKind;
use crate::metrics::{aggregate, format_latex, format_table, write_csv, PatientMetrics, ReportRow, Summary};
use crate::optim::AdamConfig;

use super::predict::evaluate_records;
use super::{train, Checkpoint, EpochLog, ExperimentConfig, TrainOptions};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const WORKERS_ENV: &str = "SEG_NUM_WORKERS";

fn default_depth() -> usize {
    2
}

fn default_base_filters() -> usize {
    8
}

fn default_batch_size() -> usize {
    8
}

fn default_eval_every() -> usize {
    1
}

/// Grid axes plus the settings shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub modalities: Vec<Modality>,
    pub losses: Vec<LossKind>,
    /// `null` is min-max CT normalization. PET-only cells ignore this axis.
    pub windows: Vec<Option<WindowSpec>>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_filters")]
    pub base_filters: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl GridSpec {
    /// Cells in selection order: modality, window, loss, seed, each as listed.
    /// PET-only gets a single unwindowed entry per loss and seed.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        if self.modalities.is_empty() || self.losses.is_empty() || self.windows.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("every grid axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &modality in &self.modalities {
            let windows: Vec<Option<WindowSpec>> = if modality.uses_ct() {
                self.windows.clone()
            } else {
                vec![None]
            };
            for window in windows {
                for &loss in &self.losses {
                    for &seed in &self.seeds {
                        let config = ExperimentConfig {
                            modality,
                            loss,
                            window,
                            seed,
                            unet: UNetSpec::new(modality.channels(), self.depth, self.base_filters)?,
                            adam: self.adam,
                            batch_size: self.batch_size,
                            epochs: self.epochs,
                            eval_every: self.eval_every,
                        };
                        config.validate()?;
                        out.push(config);
                    }
                }
            }
        }
        let mut seen = BTreeMap::new();
        for c in &out {
            if seen.insert(c.hash(), ()).is_some() {
                return Err(Error::InvalidArgument(format!("grid lists {} twice", c.label())));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Diverged { epoch: usize },
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    #[serde(flatten)]
    pub status: TrialStatus,
    pub best_validation_dice: Option<f64>,
    pub epoch_of_best: Option<usize>,
    /// Relative to the grid output directory.
    pub checkpoint: Option<PathBuf>,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub modality: Modality,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub validation_dice: f64,
    pub test: Vec<PatientMetrics>,
    pub summary: Summary,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    /// In grid order.
    pub records: Vec<TrialRecord>,
    pub trained: usize,
    pub skipped: usize,
    pub selections: Vec<Selection>,
    pub rows: Vec<ReportRow>,
}

impl GridOutcome {
    pub fn table(&self) -> String {
        format_table(&self.rows)
    }
}

/// Explicit count, else `SEG_NUM_WORKERS`, else the available cores.
pub fn worker_count(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn cell_dir(out_dir: &Path, config_hash: &str) -> PathBuf {
    out_dir.join("cells").join(&config_hash[..16.min(config_hash.len())])
}

fn read_results(path: &Path) -> Result<BTreeMap<String, TrialRecord>> {
    let mut out: BTreeMap<String, TrialRecord> = BTreeMap::new();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            // A torn final line is what an interrupted append leaves behind.
            Err(_) if i + 1 == text.lines().count() && !text.ends_with('\n') => break,
            Err(e) => return Err(Error::json(path, e)),
        };
        if rec.config.hash() != rec.config_hash {
            return Err(Error::Checkpoint(format!(
                "{} line {}: config hash does not match its config",
                path.display(),
                i + 1
            )));
        }
        if let Some(prev) = out.get(&rec.config_hash) {
            if prev != &rec {
                return Err(Error::Checkpoint(format!(
                    "conflicting results for config hash {}",
                    rec.config_hash
                )));
            }
        }
        out.insert(rec.config_hash.clone(), rec);
    }
    Ok(out)
}

/// Cut an unterminated last line left by an interrupted append.
fn drop_torn_tail(path: &Path) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(keep as u64).map_err(|e| Error::io(path, e))
}

fn check_existing(out_dir: &Path, rec: &TrialRecord) -> Result<()> {
    if let Some(rel) = &rec.checkpoint {
        let header = Checkpoint::read_header(&out_dir.join(rel))?;
        if header.config_hash != rec.config_hash {
            return Err(Error::Checkpoint(format!(
                "conflicting checkpoint {} for config hash {}",
                rel.display(),
                rec.config_hash
            )));
        }
    }
    Ok(())
}

fn run_cell(
    config: &ExperimentConfig,
    train_set: &[PatientRecord],
    validation_set: &[PatientRecord],
    out_dir: &Path,
) -> Result<TrialRecord> {
    let hash = config.hash();
    let dir = cell_dir(out_dir, &hash);
    let ckpt = dir.join("best.ckpt");
    if ckpt.exists() {
        let header = Checkpoint::read_header(&ckpt)?;
        if header.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "conflicting checkpoint {} for config hash {hash}",
                ckpt.display()
            )));
        }
    }
    let options = TrainOptions {
        checkpoint_path: Some(ckpt),
    };
    match train(config, train_set, validation_set, &options) {
        Ok(outcome) => Ok(TrialRecord {
            config_hash: hash.clone(),
            config: config.clone(),
            status: TrialStatus::Completed,
            best_validation_dice: Some(outcome.result.best_validation_dice),
            epoch_of_best: Some(outcome.result.epoch_of_best),
            checkpoint: Some(PathBuf::from("cells").join(&hash[..16]).join("best.ckpt")),
            history: outcome.history,
        }),
        Err(Error::Diverged { epoch }) => Ok(TrialRecord {
            config_hash: hash,
            config: config.clone(),
            status: TrialStatus::Diverged { epoch },
            best_validation_dice: None,
            epoch_of_best: None,
            checkpoint: None,
            history: Vec::new(),
        }),
        Err(e) => Err(e),
    }
}

/// Per modality, the completed cell with the highest validation Dice; ties
/// go to the earliest cell in grid order. Test scores play no part.
pub fn select_champions<'a>(records: &'a [TrialRecord], modalities: &[Modality]) -> Vec<(Modality, &'a TrialRecord)> {
    let mut out = Vec::new();
    for &m in modalities {
        let mut best: Option<&TrialRecord> = None;
        for r in records.iter().filter(|r| r.config.modality == m && r.status == TrialStatus::Completed) {
            let d = r.best_validation_dice.unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|b| d > b.best_validation_dice.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(r);
            }
        }
        if let Some(b) = best {
            out.push((m, b));
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train every cell not already recorded in `out_dir/results.jsonl`, select
/// one model per modality, evaluate each once on `test_set` and write
/// `report.txt`, `report.tex`, `selection.json` and `test_<modality>.csv`.
pub fn run_grid(
    grid: &GridSpec,
    train_set: &[PatientRecord],
    validation_set: &[PatientRecord],
    test_set: &[PatientRecord],
    out_dir: &Path,
    workers: usize,
) -> Result<GridOutcome> {
    let cells = grid.cells()?;
    if test_set.is_empty() {
        return Err(Error::InvalidArgument("the test set is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results_path = out_dir.join(RESULTS_FILE);
    let existing = read_results(&results_path)?;

    let mut pending = Vec::new();
    for c in &cells {
        match existing.get(&c.hash()) {
            Some(rec) => check_existing(out_dir, rec)?,
            None => pending.push(c.clone()),
        }
    }
    let skipped = cells.len() - pending.len();

    drop_torn_tail(&results_path)?;
    let sink = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let fresh: Vec<TrialRecord> = pool.install(|| {
        pending
            .par_iter()
            .map(|c| {
                let rec = run_cell(c, train_set, validation_set, out_dir)?;
                let line = serde_json::to_string(&rec).map_err(|e| Error::json(&results_path, e))?;
                let _guard = sink.lock().expect("results lock");
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&results_path)
                    .map_err(|e| Error::io(&results_path, e))?;
                writeln!(f, "{line}").map_err(|e| Error::io(&results_path, e))?;
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut by_hash = existing;
    for r in fresh {
        by_hash.insert(r.config_hash.clone(), r);
    }
    let records: Vec<TrialRecord> = cells
        .iter()
        .map(|c| by_hash.remove(&c.hash()).expect("every cell has a record"))
        .collect();

    let mut selections = Vec::new();
    let mut rows = Vec::new();
    for (modality, rec) in select_champions(&records, &grid.modalities) {
        let rel = rec.checkpoint.as_ref().expect("completed cells have a checkpoint");
        let mut ck = Checkpoint::load(&out_dir.join(rel))?;
        let test = evaluate_records(&mut ck.model, &ck.config, test_set)?;
        let summary = aggregate(&test)?;
        let csv_path = out_dir.join(format!("test_{}.csv", modality.key()));
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        write_csv(file, &test)?;
        rows.push(ReportRow {
            label: modality.label().to_string(),
            summary: summary.clone(),
        });
        selections.push(Selection {
            modality,
            config_hash: rec.config_hash.clone(),
            config: rec.config.clone(),
            validation_dice: rec.best_validation_dice.unwrap_or(0.0),
            test,
            summary,
        });
    }
    write_text(&out_dir.join("report.txt"), &format_table(&rows))?;
    write_text(&out_dir.join("report.tex"), &format_latex(&rows))?;
    let sel_path = out_dir.join("selection.json");
    let json = serde_json::to_string_pretty(&selections).map_err(|e| Error::json(&sel_path, e))?;
    write_text(&sel_path, &(json + "\n"))?;

    Ok(GridOutcome {
        records,
        trained: pending.len(),
        skipped,
        selections,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TESTED_WINDOWS;

    fn grid() -> GridSpec {
        GridSpec {
            modalities: Modality::ALL.to_vec(),
            losses: vec![LossKind::CrossEntropy, LossKind::Dice],
            windows: vec![None, Some(TESTED_WINDOWS[3])],
            seeds: vec![1, 2],
            depth: 2,
            base_filters: 8,
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 1,
            eval_every: 1,
        }
    }

    #[test]
    fn desk_grid_has_twenty_cells() {
        let cells = grid().cells().unwrap();
        assert_eq!(cells.len(), 20);
        assert_eq!(cells.iter().filter(|c| c.modality == Modality::Pet).count(), 4);
        assert!(cells.iter().all(|c| c.validate().is_ok()));
        assert_eq!(cells[0].modality, Modality::Ct);
        assert_eq!((cells[0].window, cells[0].loss, cells[0].seed), (None, LossKind::CrossEntropy, 1));
        assert_eq!(cells[1].seed, 2);
    }

    fn record(config: &ExperimentConfig, dice: f64) -> TrialRecord {
        TrialRecord {
            config_hash: config.hash(),
            config: config.clone(),
            status: TrialStatus::Completed,
            best_validation_dice: Some(dice),
            epoch_of_best: Some(1),
            checkpoint: None,
            history: Vec::new(),
        }
    }

    #[test]
    fn selection_takes_argmax_with_earliest_tie() {
        let cells = grid().cells().unwrap();
        let dice = [0.5, 0.7, 0.7, 0.6, 0.1, 0.1, 0.1, 0.1, 0.3, 0.2, 0.3, 0.1];
        let recs: Vec<TrialRecord> = cells.iter().zip(dice.iter().cycle()).map(|(c, &d)| record(c, d)).collect();
        let sel = select_champions(&recs, &Modality::ALL);
        assert_eq!(sel.len(), 3);
        assert_eq!(sel[0].1.config_hash, recs[1].config_hash);
        let scaled: Vec<TrialRecord> = recs
            .iter()
            .map(|r| TrialRecord {
                best_validation_dice: r.best_validation_dice.map(|d| d * 0.37),
                ..r.clone()
            })
            .collect();
        let again = select_champions(&scaled, &Modality::ALL);
        for (a, b) in sel.iter().zip(&again) {
            assert_eq!(a.1.config_hash, b.1.config_hash);
        }
    }

    #[test]
    fn diverged_cells_are_never_selected() {
        let cells = grid().cells().unwrap();
        let mut recs = vec![record(&cells[0], 0.2), record(&cells[1], 0.9)];
        recs[1].status = TrialStatus::Diverged { epoch: 3 };
        let sel = select_champions(&recs, &[Modality::Ct]);
        assert_eq!(sel[0].1.config_hash, recs[0].config_hash);
    }

    #[test]
    fn results_line_round_trips() {
        let cells = grid().cells().unwrap();
        let r = record(&cells[0], 0.5);
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains(r#""status":"completed""#));
        assert_eq!(serde_json::from_str::<TrialRecord>(&line).unwrap(), r);
    }

    #[test]
    fn conflicting_results_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cells = grid().cells().unwrap();
        let a = record(&cells[0], 0.5);
        let b = record(&cells[0], 0.6);
        let path = dir.path().join(RESULTS_FILE);
        let text = format!("{}\n{}\n", serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        fs::write(&path, text).unwrap();
        assert!(matches!(read_results(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn worker_count_prefers_explicit() {
        assert_eq!(worker_count(Some(3)), 3);
        assert!(worker_count(None) >= 1);
    }
}
