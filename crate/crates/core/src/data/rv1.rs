//! RV1 on-disk cohort format.
//!
//! A cohort directory holds `index.json` and one subdirectory per patient.
//! Each patient directory holds `meta.json`:
//!
//! ```json
//! {"patient_id": "P000", "t_stage": 2, "dims": [D, H, W], "dtype": "f32le",
//!  "files": {"ct": "ct.f32", "pet": "pet.f32", "gtv": "gtv.u8", "nodes": "nodes.u8"}}
//! ```
//!
//! plus flat row-major `(D, H, W)` arrays. `dtype` applies to the CT and PET
//! images (`"f32le"` or `"u8"`); masks are always `u8` with values 0/1.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Mask, PatientKey, PatientRecord, Volume};

pub const INDEX_FILE: &str = "index.json";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageDtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u8")]
    U8,
}

impl ImageDtype {
    fn width(self) -> usize {
        match self {
            ImageDtype::F32Le => 4,
            ImageDtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileNames {
    pub ct: String,
    pub pet: String,
    pub gtv: String,
    pub nodes: String,
}

impl Default for FileNames {
    fn default() -> Self {
        FileNames {
            ct: "ct.f32".into(),
            pet: "pet.f32".into(),
            gtv: "gtv.u8".into(),
            nodes: "nodes.u8".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub patient_id: String,
    pub t_stage: u8,
    pub dims: [usize; 3],
    pub dtype: ImageDtype,
    pub files: FileNames,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortIndex {
    pub format: String,
    pub patients: Vec<PatientKey>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn encode_f32le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32le(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write one patient directory.
pub fn write_patient(dir: &Path, rec: &PatientRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = FileNames::default();
    let meta = VolumeMeta {
        patient_id: rec.patient_id.clone(),
        t_stage: rec.t_stage,
        dims: rec.dims(),
        dtype: ImageDtype::F32Le,
        files: files.clone(),
    };
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(&files.ct, encode_f32le(rec.ct.data()))?;
    write(&files.pet, encode_f32le(rec.pet.data()))?;
    write(&files.gtv, rec.gtv.data().to_vec())?;
    write(&files.nodes, rec.nodes.data().to_vec())?;
    write_json(&dir.join(META_FILE), &meta)
}

fn read_raw(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

fn decode_image(bytes: &[u8], dtype: ImageDtype) -> Result<Vec<f32>> {
    match dtype {
        ImageDtype::F32Le => decode_f32le(bytes),
        ImageDtype::U8 => Ok(bytes.iter().map(|&b| b as f32).collect()),
    }
}

/// Read one patient directory; structural problems are errors.
pub fn read_patient(dir: &Path) -> Result<PatientRecord> {
    let meta: VolumeMeta = read_json(&dir.join(META_FILE))?;
    let n: usize = meta.dims.iter().product();
    let sized = |bytes: Vec<u8>, width: usize, name: &str| -> Result<Vec<u8>> {
        if bytes.len() != n * width {
            return Err(Error::Data(format!(
                "{}: size mismatch, expected {} bytes, found {}",
                dir.join(name).display(),
                n * width,
                bytes.len()
            )));
        }
        Ok(bytes)
    };
    let ct = sized(read_raw(dir, &meta.files.ct)?, meta.dtype.width(), &meta.files.ct)?;
    let pet = sized(read_raw(dir, &meta.files.pet)?, meta.dtype.width(), &meta.files.pet)?;
    let gtv = sized(read_raw(dir, &meta.files.gtv)?, 1, &meta.files.gtv)?;
    let nodes = sized(read_raw(dir, &meta.files.nodes)?, 1, &meta.files.nodes)?;
    PatientRecord::new(
        meta.patient_id,
        meta.t_stage,
        Volume::new(meta.dims, decode_image(&ct, meta.dtype)?)?,
        Volume::new(meta.dims, decode_image(&pet, meta.dtype)?)?,
        Mask::new(meta.dims, gtv)?,
        Mask::new(meta.dims, nodes)?,
    )
}

/// Write a whole cohort. Patient directories are named by patient id.
pub fn write_cohort(dir: &Path, records: &[PatientRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for rec in records {
        write_patient(&dir.join(&rec.patient_id), rec)?;
    }
    let index = CohortIndex {
        format: "RV1".into(),
        patients: records.iter().map(PatientRecord::key).collect(),
    };
    write_json(&dir.join(INDEX_FILE), &index)
}

pub fn read_index(dir: &Path) -> Result<CohortIndex> {
    let index: CohortIndex = read_json(&dir.join(INDEX_FILE))?;
    if index.format != "RV1" {
        return Err(Error::Data(format!("unsupported cohort format {:?}", index.format)));
    }
    Ok(index)
}

pub fn read_cohort(dir: &Path) -> Result<Vec<PatientRecord>> {
    read_index(dir)?
        .patients
        .iter()
        .map(|p| read_patient(&dir.join(&p.patient_id)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    MissingFile,
    BadMetadata,
    SizeMismatch,
    NonBinaryMask,
    NonFinite,
    IndexMismatch,
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FindingKind::MissingFile => "missing file",
            FindingKind::BadMetadata => "bad metadata",
            FindingKind::SizeMismatch => "size mismatch",
            FindingKind::NonBinaryMask => "non-binary mask",
            FindingKind::NonFinite => "non-finite value",
            FindingKind::IndexMismatch => "index mismatch",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub path: PathBuf,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.path.display(), self.kind, self.detail)
    }
}

/// Check the structural invariants of a cohort directory without failing
/// fast; an empty result means the cohort is clean.
pub fn validate_cohort(dir: &Path) -> Vec<Finding> {
    let mut findings = Vec::new();
    let index = match read_index(dir) {
        Ok(i) => i,
        Err(e) => {
            findings.push(Finding {
                kind: FindingKind::BadMetadata,
                path: dir.join(INDEX_FILE),
                detail: e.to_string(),
            });
            return findings;
        }
    };
    for key in &index.patients {
        validate_patient(&dir.join(&key.patient_id), Some(key), &mut findings);
    }
    findings
}

fn validate_patient(dir: &Path, key: Option<&PatientKey>, findings: &mut Vec<Finding>) {
    let meta_path = dir.join(META_FILE);
    let meta: VolumeMeta = match read_json(&meta_path) {
        Ok(m) => m,
        Err(e) => {
            let kind = if meta_path.exists() {
                FindingKind::BadMetadata
            } else {
                FindingKind::MissingFile
            };
            findings.push(Finding {
                kind,
                path: meta_path,
                detail: e.to_string(),
            });
            return;
        }
    };
    if let Some(key) = key {
        if key.patient_id != meta.patient_id || key.t_stage != meta.t_stage {
            findings.push(Finding {
                kind: FindingKind::IndexMismatch,
                path: meta_path.clone(),
                detail: format!(
                    "index says {}/T{}, metadata says {}/T{}",
                    key.patient_id, key.t_stage, meta.patient_id, meta.t_stage
                ),
            });
        }
    }
    let n: usize = meta.dims.iter().product();
    if n == 0 {
        findings.push(Finding {
            kind: FindingKind::BadMetadata,
            path: meta_path,
            detail: format!("dims {:?} contain a zero extent", meta.dims),
        });
        return;
    }
    let entries = [
        (&meta.files.ct, meta.dtype.width(), false),
        (&meta.files.pet, meta.dtype.width(), false),
        (&meta.files.gtv, 1, true),
        (&meta.files.nodes, 1, true),
    ];
    for (name, width, is_mask) in entries {
        let path = dir.join(name);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                findings.push(Finding {
                    kind: FindingKind::MissingFile,
                    path,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        if bytes.len() != n * width {
            findings.push(Finding {
                kind: FindingKind::SizeMismatch,
                path,
                detail: format!("expected {} bytes for dims {:?}, found {}", n * width, meta.dims, bytes.len()),
            });
            continue;
        }
        if is_mask {
            if let Some(pos) = bytes.iter().position(|&b| b > 1) {
                findings.push(Finding {
                    kind: FindingKind::NonBinaryMask,
                    path,
                    detail: format!("value {} at voxel {pos}", bytes[pos]),
                });
            }
        } else if meta.dtype == ImageDtype::F32Le {
            let values = decode_f32le(&bytes).unwrap_or_default();
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                findings.push(Finding {
                    kind: FindingKind::NonFinite,
                    path,
                    detail: format!("value {} at voxel {pos}", values[pos]),
                });
            }
        }
    }
}
