use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::rv1::{decode_f32le, encode_f32le, read_json, write_json};
use crate::data::{Mask, PatientRecord, SliceSample, Volume};
use crate::error::{Error, Result};
use crate::layers::{Mode, UNet};
use crate::metrics::{binarize, evaluate_patient, PatientMetrics, DEFAULT_THRESHOLD};
use crate::tensor::Graph;

use super::{stack_batch, ExperimentConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub patient_id: String,
    pub probabilities: Volume<f32>,
    pub mask: Mask,
}

pub const PREDICTION_META: &str = "prediction.json";
const PROBABILITIES_FILE: &str = "prob.f32";
const MASK_FILE: &str = "mask.u8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionMeta {
    patient_id: String,
    dims: [usize; 3],
    threshold: f64,
    probabilities: String,
    mask: String,
}

impl Prediction {
    /// Write `prediction.json`, `prob.f32` and `mask.u8` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = PredictionMeta {
            patient_id: self.patient_id.clone(),
            dims: self.mask.dims(),
            threshold: DEFAULT_THRESHOLD,
            probabilities: PROBABILITIES_FILE.into(),
            mask: MASK_FILE.into(),
        };
        let prob = dir.join(PROBABILITIES_FILE);
        fs::write(&prob, encode_f32le(self.probabilities.data())).map_err(|e| Error::io(&prob, e))?;
        let mask = dir.join(MASK_FILE);
        fs::write(&mask, self.mask.data()).map_err(|e| Error::io(&mask, e))?;
        write_json(&dir.join(PREDICTION_META), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: PredictionMeta = read_json(&dir.join(PREDICTION_META))?;
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let probabilities = Volume::new(meta.dims, decode_f32le(&read(&meta.probabilities)?)?)?;
        let mask = Mask::new(meta.dims, read(&meta.mask)?)?;
        if !mask.is_binary() {
            return Err(Error::Data(format!("{}: non-binary mask", dir.display())));
        }
        Ok(Prediction {
            patient_id: meta.patient_id,
            probabilities,
            mask,
        })
    }

    /// A prediction equal to a known mask, with probabilities 0 and 1.
    pub fn from_mask(patient_id: impl Into<String>, mask: Mask) -> Self {
        Prediction {
            patient_id: patient_id.into(),
            probabilities: mask.map(f32::from),
            mask,
        }
    }
}

/// Eval-mode inference over one patient's slices, in slice order, reassembled
/// into a `(D, H, W)` probability volume.
pub fn infer_probabilities(
    model: &mut UNet<f32>,
    samples: &[SliceSample],
    batch_size: usize,
) -> Result<Volume<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no slices to predict".into()))?;
    let dims = first.channels.dims();
    if dims[0] != model.spec().in_channels {
        return Err(Error::InvalidArgument(format!(
            "input has {} channel(s), the model takes {}",
            dims[0],
            model.spec().in_channels
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut out = Vec::with_capacity(samples.len() * h * w);
    let refs: Vec<&SliceSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, _) = stack_batch(chunk)?;
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let p = model.forward(&mut g, xv, Mode::Eval)?;
        out.extend_from_slice(g.value(p)?.data());
    }
    Volume::new([samples.len(), h, w], out)
}

/// Probability volume and binary mask for one patient.
pub fn predict(model: &mut UNet<f32>, config: &ExperimentConfig, rec: &PatientRecord) -> Result<Prediction> {
    let m = model.spec().size_multiple();
    let [_, h, w] = rec.dims();
    if h % m != 0 || w % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: slices of {h}x{w} are not divisible by {m}",
            rec.patient_id
        )));
    }
    let samples = config.slices(std::slice::from_ref(rec))?;
    let probabilities = infer_probabilities(model, &samples, config.batch_size)?;
    let mask = binarize(&probabilities, DEFAULT_THRESHOLD)?;
    Ok(Prediction {
        patient_id: rec.patient_id.clone(),
        probabilities,
        mask,
    })
}

/// Per-patient metrics of a model over `records`.
pub fn evaluate_records(
    model: &mut UNet<f32>,
    config: &ExperimentConfig,
    records: &[PatientRecord],
) -> Result<Vec<PatientMetrics>> {
    records
        .iter()
        .map(|rec| {
            let pred = predict(model, config, rec)?;
            evaluate_patient(&rec.patient_id, &pred.mask, &rec.ground_truth()?)
        })
        .collect()
}

/// Mean per-patient Dice over `records`.
pub fn validation_dice(model: &mut UNet<f32>, config: &ExperimentConfig, records: &[PatientRecord]) -> Result<f64> {
    let per = evaluate_records(model, config, records)?;
    if per.is_empty() {
        return Err(Error::InvalidArgument("no validation patients".into()));
    }
    let sum: f64 = per.iter().map(|p| p.values.dice.expect("dice is always defined")).sum();
    Ok(sum / per.len() as f64)
}
