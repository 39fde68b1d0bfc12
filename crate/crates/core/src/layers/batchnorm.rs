use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Scalar, Tensor, Var};

use super::{Mode, Param};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Fused batch-norm op: inputs are `x (N,C,H,W)`, `gamma (C)`, `beta (C)`.
struct BatchNormOp<T> {
    /// Normalized activations before the affine transform.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics were used (train mode), so mean/var depend on `x`.
    batch_stats: bool,
}

impl<T: Scalar> Function<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.shape().nchw()?;
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let dy = grad.data();

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for k in 0..c {
                let base = (b * c + k) * plane;
                for i in base..base + plane {
                    dgamma[k] += dy[i] * self.xhat[i];
                    dbeta[k] += dy[i];
                }
            }
        }

        let mut dx = vec![T::zero(); x.numel()];
        for k in 0..c {
            let scale = gamma.data()[k] * self.inv_std[k];
            if self.batch_stats {
                // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                let (sum_dy, sum_dy_xhat) = (dbeta[k], dgamma[k]);
                for b in 0..n {
                    let base = (b * c + k) * plane;
                    for i in base..base + plane {
                        dx[i] = scale / count
                            * (count * dy[i] - sum_dy - self.xhat[i] * sum_dy_xhat);
                    }
                }
            } else {
                for b in 0..n {
                    let base = (b * c + k) * plane;
                    for i in base..base + plane {
                        dx[i] = scale * dy[i];
                    }
                }
            }
        }

        Ok(vec![
            Some(Tensor::from_shape(x.shape().clone(), dx)?),
            Some(Tensor::new(vec![c], dgamma)?),
            Some(Tensor::new(vec![c], dbeta)?),
        ])
    }
}

/// Per-channel batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    running_mean: Vec<T>,
    running_var: Vec<T>,
    momentum: f64,
    epsilon: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Self::with_options(name, channels, DEFAULT_MOMENTUM, DEFAULT_EPSILON)
    }

    pub fn with_options(name: &str, channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) || !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "batch norm needs momentum in (0,1) and epsilon > 0, got {momentum}, {epsilon}"
            )));
        }
        Ok(BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(vec![channels])?),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![channels])?),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean(&self) -> &[T] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[T] {
        &self.running_var
    }

    pub fn set_running_stats(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::InvalidArgument(format!(
                "running stats for {c} channels, got {} / {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument("negative running variance".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Train mode normalizes with batch statistics over `(N,H,W)` and updates
    /// the running statistics; eval mode uses the running statistics only.
    pub fn forward(&mut self, graph: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let c = graph.value(x)?.shape().nchw()?.1;
        if c != self.channels() {
            return Err(Error::shape(
                "batchnorm (channels)",
                graph.value(x)?.dims(),
                &[self.channels()],
            ));
        }
        let gamma = self.gamma.bind(graph)?;
        let beta = self.beta.bind(graph)?;
        let stats = match mode {
            Mode::Train => None,
            Mode::Eval => Some((self.running_mean.as_slice(), self.running_var.as_slice())),
        };
        let (y, mean, var) = batch_norm(graph, x, gamma, beta, self.epsilon, stats)?;
        if mode == Mode::Train {
            let m = T::of(self.momentum);
            for k in 0..c {
                self.running_mean[k] = (T::one() - m) * self.running_mean[k] + m * mean[k];
                self.running_var[k] = (T::one() - m) * self.running_var[k] + m * var[k];
            }
        }
        Ok(y)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel of `(N,C,H,W)`.
/// With `stats` absent the batch moments are used (and differentiated
/// through); the moments actually used are returned.
pub fn batch_norm<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    epsilon: f64,
    stats: Option<(&[T], &[T])>,
) -> Result<(Var, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = graph.value(x)?.shape().nchw()?;
    for p in [gamma, beta] {
        if graph.value(p)?.dims() != [c] {
            return Err(Error::shape("batchnorm (affine)", graph.value(p)?.dims(), &[c]));
        }
    }
    let plane = h * w;
    let (mean, var) = match stats {
        None => {
            if n * plane < 2 {
                return Err(Error::InvalidArgument(
                    "train-mode batch norm needs at least two values per channel".into(),
                ));
            }
            channel_moments(graph.value(x)?.data(), n, c, plane)
        }
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batchnorm (statistics)", &[m.len(), v.len()], &[c, c]));
            }
            (m.to_vec(), v.to_vec())
        }
    };
    let eps = T::of(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (g_data, b_data) = (graph.value(gamma)?.data(), graph.value(beta)?.data());
    let xd = graph.value(x)?.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for k in 0..c {
            let base = (b * c + k) * plane;
            for i in base..base + plane {
                xhat[i] = (xd[i] - mean[k]) * inv_std[k];
                out[i] = g_data[k] * xhat[i] + b_data[k];
            }
        }
    }
    let out = Tensor::from_shape(graph.value(x)?.shape().clone(), out)?;
    let op = BatchNormOp {
        xhat,
        inv_std,
        batch_stats: stats.is_none(),
    };
    let y = graph.apply(Box::new(op), &[x, gamma, beta], out)?;
    Ok((y, mean, var))
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub fn channel_moments<T: Scalar>(data: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    for b in 0..n {
        for k in 0..c {
            let base = (b * c + k) * plane;
            mean[k] += data[base..base + plane].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for k in 0..c {
            let base = (b * c + k) * plane;
            var[k] += data[base..base + plane]
                .iter()
                .map(|&v| (v - mean[k]) * (v - mean[k]))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}
