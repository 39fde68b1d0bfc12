//! Confusion-count evaluation of binary segmentations.
//!
//! Conventions for zero denominators:
//! - empty truth and empty prediction: dice, sensitivity and ppv are 1;
//! - empty truth, nonempty prediction: sensitivity is undefined;
//! - empty prediction, nonempty truth: ppv is undefined;
//! - no true negatives or false positives: specificity is undefined.
//!
//! Undefined values are `None` and are left out of aggregate statistics.

use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use crate::data::{Mask, Volume};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Voxelwise `p >= threshold`.
pub fn binarize(probs: &Volume<f32>, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} is outside (0, 1)")));
    }
    Ok(probs.map(|p| u8::from(f64::from(p) >= threshold)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("confusion", &pred.dims(), &truth.dims()));
    }
    if !pred.is_binary() || !truth.is_binary() {
        return Err(Error::InvalidArgument("confusion: masks must be binary".into()));
    }
    let mut table = [0u64; 4];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        table[usize::from(p) * 2 + usize::from(t)] += 1;
    }
    Ok(ConfusionCounts {
        tn: table[0],
        fn_: table[1],
        fp: table[2],
        tp: table[3],
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> MetricValues {
    let truth_pos = c.tp + c.fn_;
    let pred_pos = c.tp + c.fp;
    if truth_pos == 0 && pred_pos == 0 {
        return MetricValues {
            dice: Some(1.0),
            sensitivity: Some(1.0),
            specificity: ratio(c.tn, c.tn + c.fp),
            ppv: Some(1.0),
        };
    }
    MetricValues {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, truth_pos),
        specificity: ratio(c.tn, c.tn + c.fp),
        ppv: ratio(c.tp, pred_pos),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub values: MetricValues,
}

impl PatientMetrics {
    pub fn from_counts(patient_id: impl Into<String>, counts: ConfusionCounts) -> Self {
        PatientMetrics {
            patient_id: patient_id.into(),
            counts,
            values: metrics_from_counts(&counts),
        }
    }
}

/// Metrics of one patient, counted over the whole 3-D volume.
pub fn evaluate_patient(patient_id: &str, pred: &Mask, truth: &Mask) -> Result<PatientMetrics> {
    Ok(PatientMetrics::from_counts(patient_id, confusion(pred, truth)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two defined values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(MetricSummary { mean, std, n })
    }

    /// `mean ± std` to two decimals.
    pub fn display(&self) -> String {
        match self.std {
            Some(s) => format!("{:.2} ± {:.2}", self.mean, s),
            None => format!("{:.2} ± n/a", self.mean),
        }
    }

    pub fn latex(&self) -> String {
        match self.std {
            Some(s) => format!("${:.2} \\pm {:.2}$", self.mean, s),
            None => format!("${:.2}$", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub patients: usize,
    pub sensitivity: Option<MetricSummary>,
    pub specificity: Option<MetricSummary>,
    pub dice: Option<MetricSummary>,
    pub ppv: Option<MetricSummary>,
}

impl Summary {
    /// Column order of the report.
    pub fn columns(&self) -> [Option<&MetricSummary>; 4] {
        [
            self.sensitivity.as_ref(),
            self.specificity.as_ref(),
            self.dice.as_ref(),
            self.ppv.as_ref(),
        ]
    }
}

/// Unweighted per-patient mean and sample standard deviation.
pub fn aggregate(per_patient: &[PatientMetrics]) -> Result<Summary> {
    if per_patient.is_empty() {
        return Err(Error::InvalidArgument("aggregate: no patients".into()));
    }
    let column = |f: fn(&MetricValues) -> Option<f64>| {
        let values: Vec<f64> = per_patient.iter().filter_map(|p| f(&p.values)).collect();
        MetricSummary::from_values(&values)
    };
    Ok(Summary {
        patients: per_patient.len(),
        sensitivity: column(|v| v.sensitivity),
        specificity: column(|v| v.specificity),
        dice: column(|v| v.dice),
        ppv: column(|v| v.ppv),
    })
}

pub const REPORT_COLUMNS: [&str; 4] = ["Sensitivity", "Specificity", "Dice", "PPV"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub summary: Summary,
}

fn cell(m: Option<&MetricSummary>) -> String {
    m.map_or_else(|| "n/a".to_string(), MetricSummary::display)
}

/// Plain-text table; one row per model.
pub fn format_table(rows: &[ReportRow]) -> String {
    let label_width = rows
        .iter()
        .map(|r| r.label.chars().count())
        .chain(std::iter::once("Modality".len()))
        .max()
        .unwrap_or(0);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.summary.columns().iter().map(|m| cell(*m)).collect())
        .collect();
    let widths: Vec<usize> = (0..4)
        .map(|j| {
            cells
                .iter()
                .map(|c| c[j].chars().count())
                .chain(std::iter::once(REPORT_COLUMNS[j].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "Modality");
    for (name, w) in REPORT_COLUMNS.iter().zip(&widths) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    for (row, c) in rows.iter().zip(&cells) {
        let pad = label_width - row.label.chars().count();
        let _ = write!(out, "{}{}", row.label, " ".repeat(pad));
        for (text, &w) in c.iter().zip(&widths) {
            let pad = w - text.chars().count();
            let _ = write!(out, "  {}{}", " ".repeat(pad), text);
        }
        out.push('\n');
    }
    out
}

/// LaTeX tabular body rows, e.g. `PET/CT & $0.74 \pm 0.16$ & ... \\`.
pub fn format_latex(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for row in rows {
        let cols: Vec<String> = row
            .summary
            .columns()
            .iter()
            .map(|m| m.map_or_else(|| "n/a".to_string(), MetricSummary::latex))
            .collect();
        let _ = writeln!(out, "{} & {} \\\\", row.label, cols.join(" & "));
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Per-patient CSV with `mean` and `std` summary rows. Undefined cells are empty.
pub fn write_csv<W: io::Write>(out: W, per_patient: &[PatientMetrics]) -> Result<()> {
    let summary = aggregate(per_patient)?;
    let to_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "tp", "fp", "fn", "tn", "dice", "sens", "spec", "ppv"])
        .map_err(to_err)?;
    for p in per_patient {
        let c = &p.counts;
        let v = &p.values;
        w.write_record([
            p.patient_id.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
            opt(v.dice),
            opt(v.sensitivity),
            opt(v.specificity),
            opt(v.ppv),
        ])
        .map_err(to_err)?;
    }
    let stat = |m: Option<MetricSummary>, f: fn(&MetricSummary) -> Option<f64>| opt(m.as_ref().and_then(f));
    for (label, f) in [
        ("mean", (|m: &MetricSummary| Some(m.mean)) as fn(&MetricSummary) -> Option<f64>),
        ("std", |m: &MetricSummary| m.std),
    ] {
        w.write_record([
            label.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            stat(summary.dice, f),
            stat(summary.sensitivity, f),
            stat(summary.specificity, f),
            stat(summary.ppv, f),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(())
}
