//! Network layers and the U-Net.

mod batchnorm;
mod conv;
mod param;
mod resample;
mod unet;

pub use batchnorm::{batch_norm, channel_moments, BatchNorm, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use conv::{conv2d, same_padding, Conv2dLayer};
pub use param::Param;
pub use resample::{concat_channels, maxpool2x2, split_channels, upsample2x};
pub use unet::{DoubleConv, UNet, UNetSpec, UpBlock};

/// Whether batch normalization uses batch statistics (and updates its running
/// statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
