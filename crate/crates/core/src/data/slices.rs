use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::window::{minmax_normalize, normalize_pet, window_ct};
use super::{PatientRecord, Volume, WindowSpec};

/// Which image channels feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ct,
    Pet,
    Petct,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ct, Modality::Pet, Modality::Petct];

    pub fn channels(self) -> usize {
        match self {
            Modality::Ct | Modality::Pet => 1,
            Modality::Petct => 2,
        }
    }

    pub fn uses_ct(self) -> bool {
        matches!(self, Modality::Ct | Modality::Petct)
    }

    pub fn uses_pet(self) -> bool {
        matches!(self, Modality::Pet | Modality::Petct)
    }

    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Modality::Ct => "CT-only",
            Modality::Pet => "PET-only",
            Modality::Petct => "PET/CT",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Pet => "pet",
            Modality::Petct => "petct",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ct" => Ok(Modality::Ct),
            "pet" => Ok(Modality::Pet),
            "petct" | "pet/ct" => Ok(Modality::Petct),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

/// How the CT channel of a sample was mapped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtTransform {
    /// Not part of the sample.
    Absent,
    Window(WindowSpec),
    MinMax,
}

/// One transversal slice ready for the network.
#[derive(Clone, Debug)]
pub struct SliceSample {
    pub patient_id: String,
    pub slice_index: usize,
    /// `(C, H, W)`; channel order for PET/CT is `[CT, PET]`.
    pub channels: Tensor<f32>,
    /// `(1, H, W)` binary ground truth.
    pub mask: Tensor<f32>,
    pub ct_transform: CtTransform,
}

/// Whole-volume channels normalized to `[0, 1]`, each derived from the raw
/// record exactly once.
#[derive(Clone, Debug)]
pub struct PreparedChannels {
    pub ct: Option<Volume<f32>>,
    pub pet: Option<Volume<f32>>,
    pub ct_transform: CtTransform,
}

/// Normalize the channels a modality needs: CT through `window` (or min-max
/// when `None`), PET by its 99th percentile.
pub fn prepare_channels(
    rec: &PatientRecord,
    modality: Modality,
    window: Option<WindowSpec>,
) -> Result<PreparedChannels> {
    if modality == Modality::Pet && window.is_some() {
        return Err(Error::InvalidArgument(
            "a CT window has no meaning for PET-only input".into(),
        ));
    }
    let (ct, ct_transform) = if modality.uses_ct() {
        let raw = rec.ct.data();
        if raw.is_empty() {
            return Err(Error::Data(format!("{}: missing CT data", rec.patient_id)));
        }
        let (values, transform) = match window {
            Some(w) => (window_ct(raw, w)?, CtTransform::Window(w)),
            None => (minmax_normalize(raw), CtTransform::MinMax),
        };
        (Some(Volume::new(rec.ct.dims(), values)?), transform)
    } else {
        (None, CtTransform::Absent)
    };
    let pet = if modality.uses_pet() {
        let raw = rec.pet.data();
        if raw.is_empty() {
            return Err(Error::Data(format!("{}: missing PET data", rec.patient_id)));
        }
        Some(Volume::new(rec.pet.dims(), normalize_pet(raw))?)
    } else {
        None
    };
    Ok(PreparedChannels {
        ct,
        pet,
        ct_transform,
    })
}

/// One sample per transversal slice, in slice order.
pub fn make_slices(
    rec: &PatientRecord,
    modality: Modality,
    window: Option<WindowSpec>,
) -> Result<Vec<SliceSample>> {
    let prepared = prepare_channels(rec, modality, window)?;
    let truth = rec.ground_truth()?;
    let [d, h, w] = rec.dims();
    let channels = modality.channels();
    (0..d)
        .map(|z| {
            let mut data = Vec::with_capacity(channels * h * w);
            if let Some(ct) = &prepared.ct {
                data.extend_from_slice(ct.slice(z));
            }
            if let Some(pet) = &prepared.pet {
                data.extend_from_slice(pet.slice(z));
            }
            let mask = truth.slice(z).iter().map(|&v| v as f32).collect();
            Ok(SliceSample {
                patient_id: rec.patient_id.clone(),
                slice_index: z,
                channels: Tensor::new(vec![channels, h, w], data)?,
                mask: Tensor::new(vec![1, h, w], mask)?,
                ct_transform: prepared.ct_transform,
            })
        })
        .collect()
}
