//! Training loop, checkpointing, prediction and the grid runner.

mod checkpoint;
mod grid;
mod predict;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_slices, Modality, PatientRecord, SliceSample, WindowSpec};
use crate::error::{Error, Result};
use crate::layers::{Mode, UNet, UNetSpec};
use crate::loss::LossKind;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Tensor};

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC};
pub use grid::{
    cell_dir, run_grid, select_champions, worker_count, GridOutcome, GridSpec, Selection, TrialRecord,
    TrialStatus, RESULTS_FILE, WORKERS_ENV,
};
pub use predict::{evaluate_records, infer_probabilities, predict, validation_dice, Prediction};

/// Mixed into the seed of the slice-shuffling stream so it differs from the
/// weight-initialization stream.
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn default_batch_size() -> usize {
    8
}

fn default_eval_every() -> usize {
    1
}

/// One cell of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modality: Modality,
    pub loss: LossKind,
    /// CT window; `None` selects min-max CT normalization. Must be `None` for PET.
    #[serde(default)]
    pub window: Option<WindowSpec>,
    pub seed: u64,
    pub unet: UNetSpec,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults: depth-2, 8-filter U-Net.
    pub fn desk(modality: Modality, loss: LossKind, window: Option<WindowSpec>, seed: u64, epochs: usize) -> Self {
        ExperimentConfig {
            modality,
            loss,
            window,
            seed,
            unet: UNetSpec::desk(modality.channels()),
            adam: AdamConfig::default(),
            batch_size: default_batch_size(),
            epochs,
            eval_every: default_eval_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality == Modality::Pet && self.window.is_some() {
            return Err(Error::InvalidArgument("PET-only runs take no CT window".into()));
        }
        if let Some(w) = &self.window {
            w.validate()?;
        }
        self.unet.validate()?;
        if self.unet.in_channels != self.modality.channels() {
            return Err(Error::InvalidArgument(format!(
                "{} input needs {} channel(s), the U-Net takes {}",
                self.modality.label(),
                self.modality.channels(),
                self.unet.in_channels
            )));
        }
        self.adam.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Short human label, e.g. `PET/CT dice w200c70 seed 1`.
    pub fn label(&self) -> String {
        let window = self.window.map_or_else(|| "minmax".to_string(), |w| w.label());
        let window = if self.modality == Modality::Pet { "-".to_string() } else { window };
        format!("{} {} {} seed {}", self.modality.label(), self.loss.label(), window, self.seed)
    }

    pub fn slices(&self, records: &[PatientRecord]) -> Result<Vec<SliceSample>> {
        let mut out = Vec::new();
        for rec in records {
            out.extend(make_slices(rec, self.modality, self.window)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub validation_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub best_validation_dice: f64,
    pub epoch_of_best: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub result: TrialResult,
    pub history: Vec<EpochLog>,
    /// State at the best validation epoch.
    pub best: Checkpoint,
    /// State after the last epoch.
    pub last: Checkpoint,
}

/// Stack samples into `(N, C, H, W)` inputs and `(N, 1, H, W)` targets.
pub fn stack_batch(samples: &[&SliceSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let cdims = first.channels.dims().to_vec();
    let mdims = first.mask.dims().to_vec();
    let mut x = Vec::with_capacity(samples.len() * first.channels.numel());
    let mut y = Vec::with_capacity(samples.len() * first.mask.numel());
    for s in samples {
        if s.channels.dims() != cdims.as_slice() || s.mask.dims() != mdims.as_slice() {
            return Err(Error::shape("stack_batch", s.channels.dims(), &cdims));
        }
        x.extend_from_slice(s.channels.data());
        y.extend_from_slice(s.mask.data());
    }
    let n = samples.len();
    Ok((
        Tensor::new(vec![n, cdims[0], cdims[1], cdims[2]], x)?,
        Tensor::new(vec![n, mdims[0], mdims[1], mdims[2]], y)?,
    ))
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut UNet<f32>,
    adam: &mut Adam<f32>,
    loss: LossKind,
    x: Tensor<f32>,
    y: &Tensor<f32>,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let probs = model.forward(&mut g, xv, Mode::Train)?;
    let l = loss.evaluate(&mut g, probs, y)?;
    let value = g.value(l)?.item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut grads = g.backward(l)?;
    model.absorb_gradients(&mut grads)?;
    adam.step(&mut model.params_mut())
        .map(|_| value)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the best checkpoint, if anywhere.
    pub checkpoint_path: Option<PathBuf>,
}

/// Train one configuration. Validation Dice is measured at epoch 0 and every
/// `eval_every` epochs (and after the last); the best strictly improving
/// epoch is kept.
pub fn train(
    config: &ExperimentConfig,
    train_set: &[PatientRecord],
    validation_set: &[PatientRecord],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || validation_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let hash = config.hash();
    let samples = config.slices(train_set)?;
    let mut model = UNet::<f32>::new(config.unet, config.seed)?;
    let mut adam = Adam::new(config.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);

    let initial = validation_dice(&mut model, config, validation_set)?;
    let mut history = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        validation_dice: Some(initial),
    }];
    let snapshot = |model: &UNet<f32>, adam: &Adam<f32>, epoch: usize, best: f64| Checkpoint {
        config: config.clone(),
        config_hash: hash.clone(),
        epoch,
        best_validation_dice: best,
        model: model.clone(),
        adam: adam.clone(),
    };
    let mut best = snapshot(&model, &adam, 0, initial);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, y) = stack_batch(&batch)?;
            let loss = match train_step(&mut model, &mut adam, config.loss, x, &y) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                other => other?,
            };
            total += loss;
            batches += 1;
        }
        let mut log = EpochLog {
            epoch,
            train_loss: Some(total / batches as f64),
            validation_dice: None,
        };
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let dice = validation_dice(&mut model, config, validation_set)?;
            log.validation_dice = Some(dice);
            if dice > best.best_validation_dice {
                best = snapshot(&model, &adam, epoch, dice);
            }
        }
        history.push(log);
    }

    let best_dice = best.best_validation_dice;
    let last = snapshot(&model, &adam, config.epochs, best_dice);
    if let Some(path) = &options.checkpoint_path {
        best.save(path)?;
    }
    Ok(TrainOutcome {
        result: TrialResult {
            config: config.clone(),
            config_hash: hash,
            best_validation_dice: best_dice,
            epoch_of_best: best.epoch,
            checkpoint: options.checkpoint_path.clone(),
        },
        history,
        best,
        last,
    })
}

/// Resolve `path` against `base` unless it is absolute.
pub fn resolve_path(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
