//! Differentiable primitives recorded on a [`Graph`].

use crate::error::{Error, Result};

use super::{Function, Graph, Scalar, Shape, Tensor, Var};

/// Floor applied to `log` arguments and division denominators.
pub const NUMERIC_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast_mode(op: &'static str, a: &Shape, b: &Shape) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.is_scalar() {
        Ok(Broadcast::LeftScalar)
    } else if b.is_scalar() {
        Ok(Broadcast::RightScalar)
    } else {
        Err(Error::shape(op, a.dims(), b.dims()))
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn eval<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b.max(T::of(NUMERIC_FLOOR)),
        }
    }

    /// Partial derivatives `(d/da, d/db)` at `(a, b)`.
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            BinaryKind::Add => (T::one(), T::one()),
            BinaryKind::Sub => (T::one(), -T::one()),
            BinaryKind::Mul => (b, a),
            BinaryKind::Div => {
                let floor = T::of(NUMERIC_FLOOR);
                if b > floor {
                    (T::one() / b, -a / (b * b))
                } else {
                    (T::one() / floor, T::zero())
                }
            }
        }
    }
}

struct Binary {
    kind: BinaryKind,
    mode: Broadcast,
}

impl<T: Scalar> Function<T> for Binary {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let n = output.numel();
        let at = |i: usize| match self.mode {
            Broadcast::LeftScalar => a.data()[0],
            _ => a.data()[i],
        };
        let bt = |i: usize| match self.mode {
            Broadcast::RightScalar => b.data()[0],
            _ => b.data()[i],
        };
        let mut ga = vec![T::zero(); a.numel()];
        let mut gb = vec![T::zero(); b.numel()];
        for i in 0..n {
            let (da, db) = self.kind.partials(at(i), bt(i));
            let g = grad.data()[i];
            let ia = if self.mode == Broadcast::LeftScalar { 0 } else { i };
            let ib = if self.mode == Broadcast::RightScalar { 0 } else { i };
            ga[ia] += g * da;
            gb[ib] += g * db;
        }
        Ok(vec![
            Some(Tensor::from_shape(a.shape().clone(), ga)?),
            Some(Tensor::from_shape(b.shape().clone(), gb)?),
        ])
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    AddConst(f64),
    MulConst(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Clamp(f64, f64),
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::AddConst(_) => "add_scalar",
            UnaryKind::MulConst(_) => "mul_scalar",
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Clamp(..) => "clamp",
        }
    }

    fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::AddConst(c) => x + T::of(c),
            UnaryKind::MulConst(c) => x * T::of(c),
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.max(T::of(NUMERIC_FLOOR)).ln(),
            UnaryKind::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
        }
    }

    /// Derivative at input `x` given forward output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Neg => -T::one(),
            UnaryKind::AddConst(_) => T::one(),
            UnaryKind::MulConst(c) => T::of(c),
            UnaryKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Exp => y,
            UnaryKind::Log => {
                if x > T::of(NUMERIC_FLOOR) {
                    T::one() / x
                } else {
                    T::zero()
                }
            }
            UnaryKind::Clamp(lo, hi) => {
                if x >= T::of(lo) && x <= T::of(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct Unary(UnaryKind);

impl<T: Scalar> Function<T> for Unary {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.0.derivative(x, y))
            .collect();
        Ok(vec![Some(Tensor::from_shape(x.shape().clone(), data)?)])
    }
}

#[derive(Clone, Copy, Debug)]
enum ChannelKind {
    Add,
    Mul,
}

/// `x (N,C,H,W) op c (C)` broadcast over batch and spatial positions.
struct ChannelBroadcast(ChannelKind);

impl<T: Scalar> Function<T> for ChannelBroadcast {
    fn name(&self) -> &'static str {
        match self.0 {
            ChannelKind::Add => "channel_add",
            ChannelKind::Mul => "channel_mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, c) = (inputs[0], inputs[1]);
        let (n, ch, h, w) = x.shape().nchw()?;
        let plane = h * w;
        let mut gx = vec![T::zero(); x.numel()];
        let mut gc = vec![T::zero(); ch];
        for b in 0..n {
            for k in 0..ch {
                let base = (b * ch + k) * plane;
                let cv = c.data()[k];
                for i in base..base + plane {
                    let g = grad.data()[i];
                    match self.0 {
                        ChannelKind::Add => {
                            gx[i] = g;
                            gc[k] += g;
                        }
                        ChannelKind::Mul => {
                            gx[i] = g * cv;
                            gc[k] += g * x.data()[i];
                        }
                    }
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_shape(x.shape().clone(), gx)?),
            Some(Tensor::from_shape(c.shape().clone(), gc)?),
        ])
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Function<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let k_i = k as isize;
        let n_i = n as isize;
        // dA = dC * B^T
        let mut ga = vec![T::zero(); m * k];
        T::gemm(
            m,
            n,
            k,
            T::one(),
            grad.data(),
            (n_i, 1),
            b.data(),
            (1, n_i),
            T::zero(),
            &mut ga,
            (k_i, 1),
        );
        // dB = A^T * dC
        let mut gb = vec![T::zero(); k * n];
        T::gemm(
            k,
            m,
            n,
            T::one(),
            a.data(),
            (1, k_i),
            grad.data(),
            (n_i, 1),
            T::zero(),
            &mut gb,
            (n_i, 1),
        );
        Ok(vec![
            Some(Tensor::from_shape(a.shape().clone(), ga)?),
            Some(Tensor::from_shape(b.shape().clone(), gb)?),
        ])
    }
}

/// Maps every input element to its slot in the reduced output.
fn reduction_plan(shape: &Shape, axes: Option<&[usize]>) -> Result<(Shape, Vec<usize>, usize)> {
    let dims = shape.dims();
    let rank = dims.len();
    let mut reduce = vec![axes.is_none(); rank];
    if let Some(axes) = axes {
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduce[axis] = true;
        }
    }
    let kept: Vec<usize> = (0..rank).filter(|&i| !reduce[i]).map(|i| dims[i]).collect();
    let out_shape = if kept.is_empty() {
        Shape::scalar()
    } else {
        Shape::new(kept)?
    };
    let count = (0..rank).filter(|&i| reduce[i]).map(|i| dims[i]).product();

    let in_strides = shape.strides();
    let out_strides_full = {
        // stride in output for each input axis, 0 when reduced
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            if !reduce[i] {
                s[i] = acc;
                acc *= dims[i];
            }
        }
        s
    };
    let map = (0..shape.numel())
        .map(|flat| {
            (0..rank)
                .map(|i| (flat / in_strides[i]) % dims[i] * out_strides_full[i])
                .sum()
        })
        .collect();
    Ok((out_shape, map, count))
}

struct Reduce {
    map: Vec<usize>,
    scale: f64,
}

impl<T: Scalar> Function<T> for Reduce {
    fn name(&self) -> &'static str {
        "reduce"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = T::of(self.scale);
        let data = self.map.iter().map(|&o| grad.data()[o] * scale).collect();
        Ok(vec![Some(Tensor::from_shape(inputs[0].shape().clone(), data)?)])
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let mode = broadcast_mode(kind.name(), ta.shape(), tb.shape())?;
        let (shape, n) = match mode {
            Broadcast::LeftScalar => (tb.shape().clone(), tb.numel()),
            _ => (ta.shape().clone(), ta.numel()),
        };
        let data = (0..n)
            .map(|i| {
                let x = if mode == Broadcast::LeftScalar { ta.data()[0] } else { ta.data()[i] };
                let y = if mode == Broadcast::RightScalar { tb.data()[0] } else { tb.data()[i] };
                kind.eval(x, y)
            })
            .collect();
        let out = Tensor::from_shape(shape, data)?;
        self.apply(Box::new(Binary { kind, mode }), &[a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `a / max(b, 1e-12)`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let tx = self.value(x)?;
        if matches!(kind, UnaryKind::Log) && tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("log of NaN".into()));
        }
        let out = tx.map(|v| kind.eval(v));
        self.apply(Box::new(Unary(kind)), &[x], out)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddConst(c), x)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MulConst(c), x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    /// `ln(max(x, 1e-12))`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    fn channel(&mut self, kind: ChannelKind, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x)?, self.value(c)?);
        let (n, ch, h, w) = tx.shape().nchw()?;
        if tc.dims() != [ch] {
            return Err(Error::shape("channel broadcast", tx.dims(), tc.dims()));
        }
        let plane = h * w;
        let mut data = tx.data().to_vec();
        for b in 0..n {
            for k in 0..ch {
                let cv = tc.data()[k];
                let base = (b * ch + k) * plane;
                for v in &mut data[base..base + plane] {
                    match kind {
                        ChannelKind::Add => *v += cv,
                        ChannelKind::Mul => *v *= cv,
                    }
                }
            }
        }
        let out = Tensor::from_shape(tx.shape().clone(), data)?;
        self.apply(Box::new(ChannelBroadcast(kind)), &[x, c], out)
    }

    /// Adds a per-channel vector to an `(N,C,H,W)` tensor.
    pub fn channel_add(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel(ChannelKind::Add, x, c)
    }

    /// Scales an `(N,C,H,W)` tensor by a per-channel vector.
    pub fn channel_mul(&mut self, x: Var, c: Var) -> Result<Var> {
        self.channel(ChannelKind::Mul, x, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let (m, k, k2, n) = match (ta.dims(), tb.dims()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => return Err(Error::shape("matmul", ta.dims(), tb.dims())),
        };
        if k != k2 {
            return Err(Error::shape("matmul", ta.dims(), tb.dims()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.apply(Box::new(MatMul { m, k, n }), &[a, b], out)
    }

    fn reduce(&mut self, x: Var, axes: Option<&[usize]>, mean: bool) -> Result<Var> {
        let tx = self.value(x)?;
        let (shape, map, count) = reduction_plan(tx.shape(), axes)?;
        let mut data = vec![T::zero(); shape.numel()];
        for (&o, &v) in map.iter().zip(tx.data()) {
            data[o] += v;
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            let s = T::of(scale);
            data.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::from_shape(shape, data)?;
        self.apply(Box::new(Reduce { map, scale }), &[x], out)
    }

    /// Sum over `axes` (all axes when `None`); reduced axes are dropped.
    pub fn sum(&mut self, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(x, axes, true)
    }
}
