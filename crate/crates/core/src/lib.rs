//! Tumour segmentation on co-registered CT/PET slices with a U-Net.
//!
//! The crate carries its own tensor engine ([`tensor`]), the network layers
//! ([`layers`]), Adam ([`optim`]), the cross-entropy and soft-Dice losses
//! ([`loss`]), cohort handling and preprocessing ([`data`]), evaluation
//! ([`metrics`]) and the training / model-selection protocol ([`trainer`]).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
