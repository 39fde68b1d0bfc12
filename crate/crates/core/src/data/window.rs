use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CT display window in Hounsfield units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
}

impl WindowSpec {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        let w = WindowSpec { center, width };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.center.is_finite() || !self.width.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "CT window needs a finite centre and width > 0, got ({}, {})",
                self.center, self.width
            )));
        }
        Ok(())
    }

    pub fn low(&self) -> f64 {
        self.center - self.width / 2.0
    }

    pub fn high(&self) -> f64 {
        self.center + self.width / 2.0
    }

    /// Map one HU value into `[0, 1]`.
    pub fn apply(&self, hu: f64) -> f64 {
        let (lo, hi) = (self.low(), self.high());
        (hu.clamp(lo, hi) - lo) / (hi - lo)
    }

    pub fn label(&self) -> String {
        format!("w{}c{}", self.width, self.center)
    }
}

/// The four window settings compared for the soft-tissue CT channel.
pub const TESTED_WINDOWS: [WindowSpec; 4] = [
    WindowSpec { center: 60.0, width: 100.0 },
    WindowSpec { center: 70.0, width: 100.0 },
    WindowSpec { center: 60.0, width: 200.0 },
    WindowSpec { center: 70.0, width: 200.0 },
];

/// Clamp-and-rescale HU values to `[0, 1]`.
pub fn window_ct(hu: &[f32], window: WindowSpec) -> Result<Vec<f32>> {
    window.validate()?;
    Ok(hu.iter().map(|&v| window.apply(v as f64) as f32).collect())
}

/// Per-volume min-max rescale to `[0, 1]`; a constant volume maps to zeros.
pub fn minmax_normalize(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = (hi - lo) as f64;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) as f64 / range) as f32)
        .collect()
}

/// Nearest-rank percentile (`q` in `(0, 100]`).
pub fn percentile(values: &[f32], q: f64) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Divide by the 99th-percentile uptake and clamp to `[0, 1]`. Falls back to
/// the maximum when the percentile is not positive; an all-non-positive
/// volume maps to zeros.
pub fn normalize_pet(uptake: &[f32]) -> Vec<f32> {
    let mut scale = percentile(uptake, 99.0);
    if !(scale > 0.0) {
        scale = uptake.iter().copied().fold(0.0, f32::max);
    }
    if !(scale > 0.0) {
        return vec![0.0; uptake.len()];
    }
    uptake.iter().map(|&v| (v / scale).clamp(0.0, 1.0)).collect()
}
