use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Mask, Volume};

/// One patient's co-registered images and delineations.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub t_stage: u8,
    /// Hounsfield units.
    pub ct: Volume<f32>,
    /// Uptake values.
    pub pet: Volume<f32>,
    pub gtv: Mask,
    pub nodes: Mask,
}

/// Identity and stratification label of a patient.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatientKey {
    pub patient_id: String,
    pub t_stage: u8,
}

impl PatientRecord {
    pub fn new(
        patient_id: impl Into<String>,
        t_stage: u8,
        ct: Volume<f32>,
        pet: Volume<f32>,
        gtv: Mask,
        nodes: Mask,
    ) -> Result<Self> {
        let rec = PatientRecord {
            patient_id: patient_id.into(),
            t_stage,
            ct,
            pet,
            gtv,
            nodes,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.ct.dims()
    }

    pub fn key(&self) -> PatientKey {
        PatientKey {
            patient_id: self.patient_id.clone(),
            t_stage: self.t_stage,
        }
    }

    /// Co-registration and mask binarity.
    pub fn validate(&self) -> Result<()> {
        let dims = self.ct.dims();
        for (name, d) in [
            ("pet", self.pet.dims()),
            ("gtv", self.gtv.dims()),
            ("nodes", self.nodes.dims()),
        ] {
            if d != dims {
                return Err(Error::Data(format!(
                    "{}: {name} dims {d:?} differ from ct dims {dims:?}",
                    self.patient_id
                )));
            }
        }
        if !self.gtv.is_binary() || !self.nodes.is_binary() {
            return Err(Error::Data(format!("{}: non-binary mask", self.patient_id)));
        }
        Ok(())
    }

    /// Ground truth: voxelwise union of the tumour and node delineations.
    pub fn ground_truth(&self) -> Result<Mask> {
        ground_truth_mask(&self.gtv, &self.nodes)
    }
}

pub fn ground_truth_mask(gtv: &Mask, nodes: &Mask) -> Result<Mask> {
    if gtv.dims() != nodes.dims() {
        return Err(Error::Data(format!(
            "gtv dims {:?} differ from node dims {:?}",
            gtv.dims(),
            nodes.dims()
        )));
    }
    if !gtv.is_binary() || !nodes.is_binary() {
        return Err(Error::Data("non-binary mask".into()));
    }
    let data = gtv
        .data()
        .iter()
        .zip(nodes.data())
        .map(|(&a, &b)| a | b)
        .collect();
    Volume::new(gtv.dims(), data)
}

/// Half-open box `[start, end)` along (z, y, x).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl Roi {
    pub fn full(dims: [usize; 3]) -> Self {
        Roi {
            start: [0; 3],
            end: dims,
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.end[0] - self.start[0],
            self.end[1] - self.start[1],
            self.end[2] - self.start[2],
        ]
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|i| p[i] >= self.start[i] && p[i] < self.end[i])
    }

    /// Tight box around the positive voxels, `None` for an empty mask.
    pub fn bounding_box(mask: &Mask) -> Option<Self> {
        let [d, h, w] = mask.dims();
        let mut start = [usize::MAX; 3];
        let mut end = [0; 3];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(z, y, x) != 0 {
                        let p = [z, y, x];
                        for i in 0..3 {
                            start[i] = start[i].min(p[i]);
                            end[i] = end[i].max(p[i] + 1);
                        }
                    }
                }
            }
        }
        (end[0] > 0).then_some(Roi { start, end })
    }

    /// Smallest box that holds every positive voxel and whose in-plane size is
    /// a multiple of `multiple`, grown symmetrically and shifted to fit inside
    /// the volume.
    pub fn minimal_legal(mask: &Mask, multiple: usize) -> Result<Self> {
        let dims = mask.dims();
        let Some(bbox) = Self::bounding_box(mask) else {
            return Err(Error::Data("mask has no positive voxels".into()));
        };
        let mut roi = bbox;
        for axis in 1..3 {
            let len = bbox.end[axis] - bbox.start[axis];
            let target = len.div_ceil(multiple) * multiple;
            if target > dims[axis] {
                return Err(Error::Data(format!(
                    "no {multiple}-aligned crop fits axis {axis} of {dims:?}"
                )));
            }
            let grow = target - len;
            let mut start = bbox.start[axis].saturating_sub(grow / 2);
            if start + target > dims[axis] {
                start = dims[axis] - target;
            }
            roi.start[axis] = start;
            roi.end[axis] = start + target;
        }
        Ok(roi)
    }
}

fn crop_volume<T: Copy>(v: &Volume<T>, roi: &Roi) -> Result<Volume<T>> {
    let ext = roi.extent();
    let mut data = Vec::with_capacity(ext.iter().product());
    for z in roi.start[0]..roi.end[0] {
        for y in roi.start[1]..roi.end[1] {
            let row = v.index(z, y, roi.start[2]);
            data.extend_from_slice(&v.data()[row..row + ext[2]]);
        }
    }
    Volume::new(ext, data)
}

/// Crop every array of a record to `roi`. The crop may never drop a
/// ground-truth voxel, and its in-plane size must be a multiple of
/// `size_multiple`.
pub fn crop_roi(rec: &PatientRecord, roi: &Roi, size_multiple: usize) -> Result<PatientRecord> {
    let dims = rec.dims();
    for i in 0..3 {
        if roi.start[i] >= roi.end[i] || roi.end[i] > dims[i] {
            return Err(Error::Data(format!(
                "{}: roi {roi:?} out of bounds for {dims:?}",
                rec.patient_id
            )));
        }
    }
    let ext = roi.extent();
    if size_multiple == 0 || ext[1] % size_multiple != 0 || ext[2] % size_multiple != 0 {
        return Err(Error::Data(format!(
            "{}: cropped size {}x{} is not a multiple of {size_multiple}",
            rec.patient_id, ext[1], ext[2]
        )));
    }
    let truth = rec.ground_truth()?;
    let [d, h, w] = dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if truth.get(z, y, x) != 0 && !roi.contains(z, y, x) {
                    return Err(Error::Data(format!(
                        "{}: roi {roi:?} would remove ground-truth voxel ({z}, {y}, {x})",
                        rec.patient_id
                    )));
                }
            }
        }
    }
    PatientRecord::new(
        rec.patient_id.clone(),
        rec.t_stage,
        crop_volume(&rec.ct, roi)?,
        crop_volume(&rec.pet, roi)?,
        crop_volume(&rec.gtv, roi)?,
        crop_volume(&rec.nodes, roi)?,
    )
}
