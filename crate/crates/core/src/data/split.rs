use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{PatientKey, PatientRecord};

/// Tolerance on `train + validation + test == 1`.
pub const FRACTION_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = SplitFractions {
            train,
            validation,
            test,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > FRACTION_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

/// Patient-level train/validation/test assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Split name -> T-stage -> patient count.
    pub stage_histogram: BTreeMap<SplitName, BTreeMap<u8, usize>>,
}

impl SplitManifest {
    pub fn ids(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_of(&self, patient_id: &str) -> Option<SplitName> {
        SplitName::ALL
            .into_iter()
            .find(|&s| self.ids(s).iter().any(|p| p == patient_id))
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    /// Records of one split, in manifest order.
    pub fn select(&self, split: SplitName, records: &[PatientRecord]) -> Result<Vec<PatientRecord>> {
        self.ids(split)
            .iter()
            .map(|id| {
                records
                    .iter()
                    .find(|r| &r.patient_id == id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("manifest patient {id} is not in the cohort")))
            })
            .collect()
    }
}

const ROUNDING_SLACK: f64 = 1e-9;

/// Largest-remainder apportionment of `total` into shares of `fractions`.
fn apportion(total: usize, fractions: &[f64; 3]) -> ([usize; 3], [f64; 3]) {
    let mut counts = [0usize; 3];
    let mut rema = [0f64; 3];
    for j in 0..3 {
        let quota = total as f64 * fractions[j];
        let floor = (quota + ROUNDING_SLACK).floor();
        counts[j] = floor as usize;
        rema[j] = (quota - floor).max(0.0);
    }
    let mut left = total - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rema[b].total_cmp(&rema[a]).then(a.cmp(&b)));
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    (counts, rema)
}

/// Augmenting-path search placing one extra patient of `row` into a split
/// that still has room, possibly moving other strata's extras around.
fn augment(
    row: usize,
    extra: &mut [[bool; 3]],
    rema: &[[f64; 3]],
    room: &mut [usize; 3],
    visited: &mut [bool; 3],
) -> bool {
    let mut cols = [0usize, 1, 2];
    cols.sort_by(|&a, &b| rema[row][b].total_cmp(&rema[row][a]).then(a.cmp(&b)));
    for &j in &cols {
        if extra[row][j] || rema[row][j] <= ROUNDING_SLACK || visited[j] {
            continue;
        }
        visited[j] = true;
        if room[j] > 0 {
            room[j] -= 1;
            extra[row][j] = true;
            return true;
        }
        for other in 0..extra.len() {
            if other != row && extra[other][j] {
                extra[other][j] = false;
                if augment(other, extra, rema, room, visited) {
                    extra[row][j] = true;
                    return true;
                }
                extra[other][j] = true;
            }
        }
    }
    false
}

/// Split patients into train/validation/test, stratified by T-stage.
///
/// Global split sizes follow largest-remainder rounding of the cohort size;
/// every stratum receives either the floor or the ceiling of its exact share
/// in each split. Patients are shuffled within a stratum with `seed`.
pub fn stratified_split(
    patients: &[PatientKey],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitManifest> {
    fractions.validate()?;
    if patients.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty cohort".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in patients {
        if !seen.insert(&p.patient_id) {
            return Err(Error::Data(format!("duplicate patient id {}", p.patient_id)));
        }
    }
    let f = fractions.as_array();

    let mut strata: BTreeMap<u8, Vec<&PatientKey>> = BTreeMap::new();
    for p in patients {
        strata.entry(p.t_stage).or_default().push(p);
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();

    let (targets, _) = apportion(patients.len(), &f);
    let mut base = Vec::with_capacity(sizes.len());
    let mut rema = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let mut row = [0usize; 3];
        let mut r = [0f64; 3];
        for j in 0..3 {
            let quota = n as f64 * f[j];
            let floor = (quota + ROUNDING_SLACK).floor();
            row[j] = floor as usize;
            r[j] = (quota - floor).max(0.0);
        }
        base.push(row);
        rema.push(r);
    }
    let mut room = [0usize; 3];
    for j in 0..3 {
        let used: usize = base.iter().map(|r| r[j]).sum();
        room[j] = targets[j].checked_sub(used).ok_or_else(|| {
            Error::Data("inconsistent split apportionment".into())
        })?;
    }
    let mut extra = vec![[false; 3]; sizes.len()];
    for (s, &n) in sizes.iter().enumerate() {
        let need = n - base[s].iter().sum::<usize>();
        for _ in 0..need {
            let mut visited = [false; 3];
            if !augment(s, &mut extra, &rema, &mut room, &mut visited) {
                return Err(Error::Data("no stratified rounding satisfies the split sizes".into()));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: [Vec<String>; 3] = Default::default();
    let mut histogram: BTreeMap<SplitName, BTreeMap<u8, usize>> = BTreeMap::new();
    for (s, (stage, members)) in strata.iter().enumerate() {
        let mut ids: Vec<&str> = members.iter().map(|p| p.patient_id.as_str()).collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let mut cursor = 0;
        for (j, name) in SplitName::ALL.into_iter().enumerate() {
            let count = base[s][j] + usize::from(extra[s][j]);
            assigned[j].extend(ids[cursor..cursor + count].iter().map(|s| s.to_string()));
            cursor += count;
            if count > 0 {
                histogram.entry(name).or_default().insert(*stage, count);
            }
        }
    }
    for ids in &mut assigned {
        ids.sort();
    }
    let [train, validation, test] = assigned;
    Ok(SplitManifest {
        seed,
        fractions,
        train,
        validation,
        test,
        stage_histogram: histogram,
    })
}
