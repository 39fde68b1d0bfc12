//! Cohorts, preprocessing and splitting.

mod phantom;
mod record;
pub mod rv1;
mod slices;
mod split;
mod volume;
mod window;

pub use phantom::{
    count_components, generate_phantom_cohort, lesion_stats, LesionStats, PHANTOM_SIZE_MULTIPLE,
};
pub use record::{crop_roi, ground_truth_mask, PatientKey, PatientRecord, Roi};
pub use slices::{make_slices, prepare_channels, CtTransform, Modality, PreparedChannels, SliceSample};
pub use split::{stratified_split, SplitFractions, SplitManifest, SplitName, FRACTION_SUM_TOLERANCE};
pub use volume::{Mask, Volume};
pub use window::{minmax_normalize, normalize_pet, percentile, window_ct, WindowSpec, TESTED_WINDOWS};
