use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Trainable tensor plus the gradient left by the last backward pass.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    var: Option<Var>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
            var: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape("set_grad", grad.dims(), self.value.dims()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Register as a gradient-tracked leaf of `graph`.
    pub fn bind(&mut self, graph: &mut Graph<T>) -> Result<Var> {
        let v = graph.param(self.value.clone())?;
        self.var = Some(v);
        Ok(v)
    }

    /// Take this parameter's gradient out of a finished backward pass,
    /// accumulating onto any gradient already held.
    pub fn absorb(&mut self, grads: &mut Gradients<T>) -> Result<()> {
        let Some(v) = self.var.take() else {
            return Ok(());
        };
        let Some(g) = grads.take(v) else {
            return Ok(());
        };
        match &mut self.grad {
            Some(acc) => acc.add_assign(&g)?,
            None => self.grad = Some(g),
        }
        Ok(())
    }
}
