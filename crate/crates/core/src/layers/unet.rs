use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

use super::{concat_channels, maxpool2x2, upsample2x, BatchNorm, Conv2dLayer, Mode, Param};

/// U-Net topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    /// 1 for a single modality, 2 for stacked CT and PET.
    pub in_channels: usize,
    /// Number of down-sampling stages.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Filters of the first stage; doubled at every stage.
    #[serde(default = "default_base_filters")]
    pub base_filters: usize,
}

fn default_depth() -> usize {
    4
}

fn default_base_filters() -> usize {
    64
}

impl UNetSpec {
    pub fn new(in_channels: usize, depth: usize, base_filters: usize) -> Result<Self> {
        let spec = UNetSpec {
            in_channels,
            depth,
            base_filters,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The small configuration used for desk-scale runs.
    pub fn desk(in_channels: usize) -> Self {
        UNetSpec {
            in_channels,
            depth: 2,
            base_filters: 8,
        }
    }

    pub fn out_channels(&self) -> usize {
        1
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 {
            return Err(Error::InvalidArgument(
                "U-Net needs at least one input channel and one filter".into(),
            ));
        }
        if self.depth > 8 {
            return Err(Error::InvalidArgument(format!("U-Net depth {} is too large", self.depth)));
        }
        Ok(())
    }

    /// Filters at `stage` (0 = full resolution, `depth` = bottleneck).
    pub fn filters(&self, stage: usize) -> usize {
        self.base_filters << stage
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// `conv3x3 -> ReLU -> BN -> conv3x3 -> ReLU -> BN`.
#[derive(Clone, Debug)]
pub struct DoubleConv<T: Scalar> {
    pub conv1: Conv2dLayer<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2dLayer<T>,
    pub bn2: BatchNorm<T>,
}

impl<T: Scalar> DoubleConv<T> {
    fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DoubleConv {
            conv1: Conv2dLayer::new(&format!("{name}.conv1"), cin, cout, 3, rng)?,
            bn1: BatchNorm::new(&format!("{name}.bn1"), cout)?,
            conv2: Conv2dLayer::new(&format!("{name}.conv2"), cout, cout, 3, rng)?,
            bn2: BatchNorm::new(&format!("{name}.bn2"), cout)?,
        })
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let x = self.conv1.forward(g, x)?;
        let x = g.relu(x)?;
        let x = self.bn1.forward(g, x, mode)?;
        let x = self.conv2.forward(g, x)?;
        let x = g.relu(x)?;
        self.bn2.forward(g, x, mode)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        let DoubleConv {
            conv1,
            bn1,
            conv2,
            bn2,
        } = self;
        conv1
            .params_mut()
            .into_iter()
            .chain(bn1.params_mut())
            .chain(conv2.params_mut())
            .chain(bn2.params_mut())
    }

    fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.conv1
            .params()
            .into_iter()
            .chain(self.bn1.params())
            .chain(self.conv2.params())
            .chain(self.bn2.params())
    }

    fn norms(&self) -> [&BatchNorm<T>; 2] {
        [&self.bn1, &self.bn2]
    }

    fn norms_mut(&mut self) -> [&mut BatchNorm<T>; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

/// Nearest upsampling, 2x2 up-convolution, skip concatenation, double conv.
#[derive(Clone, Debug)]
pub struct UpBlock<T: Scalar> {
    pub up: Conv2dLayer<T>,
    pub block: DoubleConv<T>,
}

/// Encoder/decoder segmentation network producing a foreground probability map.
#[derive(Clone, Debug)]
pub struct UNet<T: Scalar> {
    spec: UNetSpec,
    encoder: Vec<DoubleConv<T>>,
    bottleneck: DoubleConv<T>,
    /// Ordered from the deepest stage to full resolution.
    decoder: Vec<UpBlock<T>>,
    head: Conv2dLayer<T>,
}

impl<T: Scalar> UNet<T> {
    /// He-normal initialization drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(spec.depth);
        let mut cin = spec.in_channels;
        for stage in 0..spec.depth {
            let cout = spec.filters(stage);
            encoder.push(DoubleConv::new(&format!("enc{stage}"), cin, cout, &mut rng)?);
            cin = cout;
        }
        let bottleneck =
            DoubleConv::new("bottleneck", cin, spec.filters(spec.depth), &mut rng)?;
        let mut decoder = Vec::with_capacity(spec.depth);
        for stage in (0..spec.depth).rev() {
            let (deep, here) = (spec.filters(stage + 1), spec.filters(stage));
            decoder.push(UpBlock {
                up: Conv2dLayer::up_convolution(&format!("dec{stage}.up"), deep, here, &mut rng)?,
                block: DoubleConv::new(&format!("dec{stage}"), 2 * here, here, &mut rng)?,
            });
        }
        let head = Conv2dLayer::new("head", spec.filters(0), spec.out_channels(), 1, &mut rng)?;
        Ok(UNet {
            spec,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    /// `x` is `(N, in_channels, H, W)` with `H` and `W` divisible by `2^depth`;
    /// returns sigmoid probabilities of shape `(N, 1, H, W)`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let (_, c, h, w) = g.value(x)?.shape().nchw()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "unet (input channels)",
                g.value(x)?.dims(),
                &[self.spec.in_channels],
            ));
        }
        let m = self.spec.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} is not divisible by {m} (depth {})",
                self.spec.depth
            )));
        }

        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut x = x;
        for block in &mut self.encoder {
            let features = block.forward(g, x, mode)?;
            skips.push(features);
            x = maxpool2x2(g, features)?;
        }
        x = self.bottleneck.forward(g, x, mode)?;
        for up in &mut self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let y = upsample2x(g, x)?;
            let y = up.up.forward(g, y)?;
            let y = concat_channels(g, skip, y)?;
            x = up.block.forward(g, y, mode)?;
        }
        let logits = self.head.forward(g, x)?;
        g.sigmoid(logits)
    }

    /// Trainable parameters in declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        for block in &mut self.encoder {
            out.extend(block.params_mut());
        }
        out.extend(self.bottleneck.params_mut());
        for up in &mut self.decoder {
            out.extend(up.up.params_mut());
            out.extend(up.block.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = Vec::new();
        for block in &self.encoder {
            out.extend(block.params());
        }
        out.extend(self.bottleneck.params());
        for up in &self.decoder {
            out.extend(up.up.params());
            out.extend(up.block.params());
        }
        out.extend(self.head.params());
        out
    }

    /// Batch-norm layers in declaration order.
    pub fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = Vec::new();
        for block in &self.encoder {
            out.extend(block.norms());
        }
        out.extend(self.bottleneck.norms());
        for up in &self.decoder {
            out.extend(up.block.norms());
        }
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = Vec::new();
        for block in &mut self.encoder {
            out.extend(block.norms_mut());
        }
        out.extend(self.bottleneck.norms_mut());
        for up in &mut self.decoder {
            out.extend(up.block.norms_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }

    /// Move gradients of the last backward pass into the parameters.
    pub fn absorb_gradients(&mut self, grads: &mut crate::tensor::Gradients<T>) -> Result<()> {
        for p in self.params_mut() {
            p.absorb(grads)?;
        }
        Ok(())
    }

    pub fn clear_gradients(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }
}
