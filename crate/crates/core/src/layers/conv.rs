use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Scalar, Tensor, Var};

use super::Param;

/// Zero padding `(before, after)` that keeps the spatial size for kernel `k`.
pub fn same_padding(k: usize) -> (usize, usize) {
    let before = (k - 1) / 2;
    (before, k - 1 - before)
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Unroll one `(C,H,W)` image into a `(C*k*k, H*W)` column matrix.
fn im2col<T: Scalar>(img: &[T], geo: &Geometry, col: &mut [T]) {
    let (h, w, k, pad) = (geo.h, geo.w, geo.k, geo.pad);
    let plane = geo.plane();
    for c in 0..geo.c {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let ix = x as isize + kx as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto a `(C,H,W)` image.
fn col2im<T: Scalar>(col: &[T], geo: &Geometry, img: &mut [T]) {
    let (h, w, k, pad) = (geo.h, geo.w, geo.k, geo.pad);
    let plane = geo.plane();
    for c in 0..geo.c {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let ix = x as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d<T> {
    geo: Geometry,
    cols: Vec<T>,
    has_bias: bool,
}

impl<T: Scalar> Function<T> for Conv2d<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let geo = &self.geo;
        let (patch, plane, oc) = (geo.patch(), geo.plane(), geo.oc);
        let weight = inputs[1];
        let mut gx = vec![T::zero(); inputs[0].numel()];
        let mut gw = vec![T::zero(); weight.numel()];
        let mut dcol = vec![T::zero(); patch * plane];
        for b in 0..geo.n {
            let gy = &grad.data()[b * oc * plane..(b + 1) * oc * plane];
            let col = &self.cols[b * patch * plane..(b + 1) * patch * plane];
            // dW += dY (oc x HW) * col^T (HW x patch)
            T::gemm(
                oc,
                plane,
                patch,
                T::one(),
                gy,
                (plane as isize, 1),
                col,
                (1, plane as isize),
                T::one(),
                &mut gw,
                (patch as isize, 1),
            );
            // dcol = W^T (patch x oc) * dY (oc x HW)
            T::gemm(
                patch,
                oc,
                plane,
                T::one(),
                weight.data(),
                (1, patch as isize),
                gy,
                (plane as isize, 1),
                T::zero(),
                &mut dcol,
                (plane as isize, 1),
            );
            col2im(&dcol, geo, &mut gx[b * geo.c * plane..(b + 1) * geo.c * plane]);
        }
        let mut out = vec![
            Some(Tensor::from_shape(inputs[0].shape().clone(), gx)?),
            Some(Tensor::from_shape(weight.shape().clone(), gw)?),
        ];
        if self.has_bias {
            let mut gb = vec![T::zero(); oc];
            for b in 0..geo.n {
                for (o, acc) in gb.iter_mut().enumerate() {
                    let base = (b * oc + o) * plane;
                    *acc += grad.data()[base..base + plane].iter().copied().sum::<T>();
                }
            }
            out.push(Some(Tensor::new(vec![oc], gb)?));
        }
        Ok(out)
    }
}

/// Stride-1 cross-correlation with "same" zero padding.
///
/// `x` is `(N,C,H,W)`, `weight` is `(O,C,k,k)`, `bias` is `(O)`. Odd `k` pads
/// symmetrically; even `k` puts the extra row/column of zeros after the image.
pub fn conv2d<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let tx = graph.value(x)?;
    let tw = graph.value(weight)?;
    let (n, c, h, w) = tx.shape().nchw()?;
    let (oc, ic, kh, kw) = tw.shape().nchw()?;
    if ic != c {
        return Err(Error::shape("conv2d (input channels)", tx.dims(), tw.dims()));
    }
    if kh != kw {
        return Err(Error::InvalidArgument(format!(
            "conv2d needs a square kernel, got {kh}x{kw}"
        )));
    }
    let geo = Geometry {
        n,
        c,
        h,
        w,
        oc,
        k: kh,
        pad: same_padding(kh).0,
    };
    let (patch, plane) = (geo.patch(), geo.plane());
    let mut cols = vec![T::zero(); n * patch * plane];
    let mut out = vec![T::zero(); n * oc * plane];
    for b in 0..n {
        let img = &tx.data()[b * c * plane..(b + 1) * c * plane];
        let col = &mut cols[b * patch * plane..(b + 1) * patch * plane];
        im2col(img, &geo, col);
        T::gemm(
            oc,
            patch,
            plane,
            T::one(),
            tw.data(),
            (patch as isize, 1),
            col,
            (plane as isize, 1),
            T::zero(),
            &mut out[b * oc * plane..(b + 1) * oc * plane],
            (plane as isize, 1),
        );
    }
    let mut inputs = vec![x, weight];
    if let Some(bias) = bias {
        let tb = graph.value(bias)?;
        if tb.dims() != [oc] {
            return Err(Error::shape("conv2d (bias)", tb.dims(), &[oc]));
        }
        for b in 0..n {
            for o in 0..oc {
                let bv = tb.data()[o];
                let base = (b * oc + o) * plane;
                out[base..base + plane].iter_mut().for_each(|v| *v += bv);
            }
        }
        inputs.push(bias);
    }
    let out = Tensor::new(vec![n, oc, h, w], out)?;
    let op = Conv2d {
        geo,
        cols,
        has_bias: bias.is_some(),
    };
    graph.apply(Box::new(op), &inputs, out)
}

/// Convolution layer with its weight and bias.
#[derive(Clone, Debug)]
pub struct Conv2dLayer<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    kernel: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias. `kernel` must be odd.
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "convolution kernel must be odd, got {kernel}"
            )));
        }
        Self::init(name, in_channels, out_channels, kernel, rng)
    }

    /// The 2x2 learned convolution that follows nearest-neighbour upsampling.
    pub fn up_convolution<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init(name, in_channels, out_channels, 2, rng)
    }

    fn init<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::InvalidArgument("empty convolution".into()));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let count = out_channels * in_channels * kernel * kernel;
        let w: Vec<T> = (0..count).map(|_| T::of(normal.sample(rng))).collect();
        Ok(Conv2dLayer {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::new(vec![out_channels, in_channels, kernel, kernel], w)?,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![out_channels])?),
            kernel,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().dims()[0]
    }

    pub fn forward(&mut self, graph: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(graph)?;
        let b = self.bias.bind(graph)?;
        conv2d(graph, x, w, Some(b))
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}
