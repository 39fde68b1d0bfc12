use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Scalar, Tensor, Var};

struct MaxPool {
    /// Flat input index of the winning element for every output element.
    argmax: Vec<usize>,
}

impl<T: Scalar> Function<T> for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool2x2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut gx = vec![T::zero(); inputs[0].numel()];
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            gx[src] += g;
        }
        Ok(vec![Some(Tensor::from_shape(inputs[0].shape().clone(), gx)?)])
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// order within the block.
pub fn maxpool2x2<T: Scalar>(graph: &mut Graph<T>, x: Var) -> Result<Var> {
    let tx = graph.value(x)?;
    let (n, c, h, w) = tx.shape().nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            dims: tx.dims().to_vec(),
            reason: "max pooling needs even height and width",
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = tx.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(vec![n, c, oh, ow], out)?;
    graph.apply(Box::new(MaxPool { argmax }), &[x], out)
}

struct Upsample;

impl<T: Scalar> Function<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, c, h, w) = inputs[0].shape().nchw()?;
        let ow = 2 * w;
        let mut gx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let src = &grad.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..ow {
                    gx[plane * h * w + (y / 2) * w + x / 2] += src[y * ow + x];
                }
            }
        }
        Ok(vec![Some(Tensor::from_shape(inputs[0].shape().clone(), gx)?)])
    }
}

/// Nearest-neighbour 2x spatial replication.
pub fn upsample2x<T: Scalar>(graph: &mut Graph<T>, x: Var) -> Result<Var> {
    let tx = graph.value(x)?;
    let (n, c, h, w) = tx.shape().nchw()?;
    let ow = 2 * w;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &tx.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    let out = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
    graph.apply(Box::new(Upsample), &[x], out)
}

struct Concat {
    first: usize,
    second: usize,
}

impl<T: Scalar> Function<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = split_channels(grad, self.first)?;
        debug_assert_eq!(b.dims()[1], self.second);
        debug_assert_eq!(a.shape(), inputs[0].shape());
        Ok(vec![Some(a), Some(b)])
    }
}

/// Stack `a (N,C1,H,W)` and `b (N,C2,H,W)` along the channel axis.
pub fn concat_channels<T: Scalar>(graph: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (graph.value(a)?, graph.value(b)?);
    let (n, c1, h, w) = ta.shape().nchw()?;
    let (n2, c2, h2, w2) = tb.shape().nchw()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape("concat_channels", ta.dims(), tb.dims()));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (c1 + c2) * plane);
    for i in 0..n {
        out.extend_from_slice(&ta.data()[i * c1 * plane..(i + 1) * c1 * plane]);
        out.extend_from_slice(&tb.data()[i * c2 * plane..(i + 1) * c2 * plane]);
    }
    let out = Tensor::new(vec![n, c1 + c2, h, w], out)?;
    graph.apply(Box::new(Concat { first: c1, second: c2 }), &[a, b], out)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.shape().nchw()?;
    if first == 0 || first >= c {
        return Err(Error::InvalidArgument(format!(
            "cannot split {c} channels at {first}"
        )));
    }
    let plane = h * w;
    let second = c - first;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * second * plane);
    for i in 0..n {
        let img = &x.data()[i * c * plane..(i + 1) * c * plane];
        a.extend_from_slice(&img[..first * plane]);
        b.extend_from_slice(&img[first * plane..]);
    }
    Ok((
        Tensor::new(vec![n, first, h, w], a)?,
        Tensor::new(vec![n, second, h, w], b)?,
    ))
}
