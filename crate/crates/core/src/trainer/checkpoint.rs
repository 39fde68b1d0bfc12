//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `SEGCKPT1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then little-endian `f32` blobs in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::UNet;
use crate::optim::{Adam, Moments};

use super::ExperimentConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Param,
    RunningMean,
    RunningVar,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: BlobKind,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub best_validation_dice: f64,
    pub adam_step: u64,
    pub parameter_count: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Model, normalization and optimizer state of one trial.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub best_validation_dice: f64,
    pub model: UNet<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    fn layout(&self) -> (Vec<TensorEntry>, Vec<&[f32]>) {
        let mut entries = Vec::new();
        let mut blobs: Vec<&[f32]> = Vec::new();
        let params = self.model.params();
        for p in &params {
            entries.push(TensorEntry {
                name: p.name().to_string(),
                kind: BlobKind::Param,
                shape: p.value().dims().to_vec(),
            });
            blobs.push(p.value().data());
        }
        for (i, bn) in self.model.norms().into_iter().enumerate() {
            for (kind, data) in [
                (BlobKind::RunningMean, bn.running_mean()),
                (BlobKind::RunningVar, bn.running_var()),
            ] {
                entries.push(TensorEntry {
                    name: format!("norm{i}"),
                    kind,
                    shape: vec![data.len()],
                });
                blobs.push(data);
            }
        }
        for (p, mo) in params.iter().zip(self.adam.moments()) {
            for (kind, data) in [(BlobKind::AdamM, &mo.m), (BlobKind::AdamV, &mo.v)] {
                entries.push(TensorEntry {
                    name: p.name().to_string(),
                    kind,
                    shape: p.value().dims().to_vec(),
                });
                blobs.push(data);
            }
        }
        (entries, blobs)
    }

    pub fn header(&self) -> CheckpointHeader {
        let (tensors, _) = self.layout();
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            best_validation_dice: self.best_validation_dice,
            adam_step: self.adam.step_count(),
            parameter_count: self.model.parameter_count(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (tensors, blobs) = self.layout();
        let header = CheckpointHeader {
            tensors,
            ..self.header()
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let body: usize = blobs.iter().map(|b| b.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + body);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for blob in blobs {
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Write through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        split_header(&bytes).map(|(h, _)| h)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.format_version)));
        }
        header.config.validate()?;
        if header.config_hash != header.config.hash() {
            return Err(Error::Checkpoint("config hash does not match the embedded config".into()));
        }
        let expected: usize = header.tensors.iter().map(|t| t.numel() * 4).sum();
        if body.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} bytes of tensor data, found {}",
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };

        let mut model = UNet::<f32>::new(header.config.unet, 0)?;
        let mut entries = header.tensors.iter();
        let mut next = |kind: BlobKind, shape: &[usize]| -> Result<&TensorEntry> {
            let e = entries
                .next()
                .ok_or_else(|| Error::Checkpoint("tensor list is too short".into()))?;
            if e.kind != kind || e.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} ({:?} {:?}) does not fit the topology, expected {:?} {:?}",
                    e.name, e.kind, e.shape, kind, shape
                )));
            }
            Ok(e)
        };
        let mut moments_shape = Vec::new();
        for p in model.params_mut() {
            let shape = p.value().dims().to_vec();
            let e = next(BlobKind::Param, &shape)?;
            if e.name != p.name() {
                return Err(Error::Checkpoint(format!("expected {}, found {}", p.name(), e.name)));
            }
            p.value_mut().data_mut().copy_from_slice(&take(e.numel()));
            moments_shape.push(shape);
        }
        for bn in model.norms_mut() {
            let c = vec![bn.channels()];
            let mean = take(next(BlobKind::RunningMean, &c)?.numel());
            let var = take(next(BlobKind::RunningVar, &c)?.numel());
            bn.set_running_stats(mean, var)?;
        }
        let mut moments = Vec::new();
        if header.adam_step > 0 {
            for shape in &moments_shape {
                let m = take(next(BlobKind::AdamM, shape)?.numel());
                let v = take(next(BlobKind::AdamV, shape)?.numel());
                moments.push(Moments { m, v });
            }
        }
        let per_param = if header.adam_step > 0 { 3 } else { 1 };
        if header.tensors.len() != moments_shape.len() * per_param + 2 * model.norms().len() {
            return Err(Error::Checkpoint("unexpected trailing tensors".into()));
        }
        let mut adam = Adam::new(header.config.adam)?;
        adam.restore(header.adam_step, moments);
        Ok(Checkpoint {
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            best_validation_dice: header.best_validation_dice,
            model,
            adam,
        })
    }
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing SEGCKPT1 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, &bytes[end..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use crate::layers::Mode;
    use crate::loss::LossKind;
    use crate::tensor::{Graph, Tensor};

    fn sample_checkpoint() -> Checkpoint {
        let mut config = ExperimentConfig::desk(Modality::Petct, LossKind::Dice, None, 3, 1);
        config.unet.base_filters = 2;
        let mut model = UNet::<f32>::new(config.unet, 3).unwrap();
        let mut adam = Adam::new(config.adam).unwrap();
        let x = Tensor::new(vec![2, 2, 8, 8], (0..256).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let y = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();
        super::super::train_step(&mut model, &mut adam, LossKind::Dice, x, &y).unwrap();
        Checkpoint {
            config_hash: config.hash(),
            config,
            epoch: 1,
            best_validation_dice: 0.25,
            model,
            adam,
        }
    }

    fn forward(model: &mut UNet<f32>) -> Vec<f32> {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 2, 8, 8], (0..128).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let xv = g.constant(x).unwrap();
        let p = model.forward(&mut g, xv, Mode::Eval).unwrap();
        g.value(p).unwrap().data().to_vec()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = sample_checkpoint();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"SEGCKPT1");
        let mut back = Checkpoint::from_bytes(&bytes).unwrap();
        let a: Vec<u32> = forward(&mut ck.model).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = forward(&mut back.model).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.adam.step_count(), 1);
        assert_eq!(back.adam.moments(), ck.adam.moments());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample_checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT________").is_err());
        let mut tampered = bytes.clone();
        tampered[8] = tampered[8].wrapping_add(1);
        assert!(Checkpoint::from_bytes(&tampered).is_err());
    }
}
