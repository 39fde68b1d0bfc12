use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

/// Backward rule of a recorded operation.
///
/// `backward` receives the forward inputs, the forward output and the gradient
/// flowing into the output, and returns one gradient per input (`None` for
/// inputs that receive no gradient).
pub trait Function<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    op: Option<Box<dyn Function<T>>>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Live,
    Consumed,
}

/// Append-only record of one forward pass.
///
/// Node ids are insertion indices, so every input id is smaller than the id of
/// the node that consumes it and the backward sweep runs in decreasing id order.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    state: State,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            state: State::Live,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turn every NaN/Inf in a forward result into a hard error.
    pub fn with_finite_check(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.ensure_live()?;
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Ok(Var { id, graph: self.id })
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check_var(v)?;
        Ok(&self.nodes[v.id].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check_var(v)?;
        Ok(self.nodes[v.id].requires_grad)
    }

    /// Record `output = op(inputs)`.
    pub fn apply(
        &mut self,
        op: Box<dyn Function<T>>,
        inputs: &[Var],
        output: Tensor<T>,
    ) -> Result<Var> {
        self.ensure_live()?;
        for &v in inputs {
            self.check_var(v)?;
        }
        if self.check_finite && !output.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let id = self.nodes.len();
        let inputs: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        assert!(inputs.iter().all(|&i| i < id), "graph must stay acyclic");
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            inputs,
            value: output,
            requires_grad,
        });
        Ok(Var { id, graph: self.id })
    }

    /// Reverse sweep from a scalar `loss`; the graph is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.ensure_live()?;
        self.check_var(loss)?;
        let loss_value = &self.nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {}",
                loss_value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_value.dims().to_vec(), T::one())?);

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Graph(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[input].value.shape() {
                    return Err(Error::Graph(format!(
                        "{} produced gradient of shape {} for input of shape {}",
                        op.name(),
                        g.shape(),
                        self.nodes[input].value.shape()
                    )));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }

        let leaf_grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.op.is_none() && node.requires_grad {
                    Some(g.unwrap_or_else(|| Tensor::zeros_like(&node.value)))
                } else {
                    None
                }
            })
            .collect();

        self.nodes.clear();
        self.state = State::Consumed;
        Ok(Gradients {
            graph: self.id,
            grads: leaf_grads,
        })
    }

    fn ensure_live(&self) -> Result<()> {
        match self.state {
            State::Live => Ok(()),
            State::Consumed => Err(Error::Graph(
                "graph already consumed by backward; run a new forward pass".into(),
            )),
        }
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.graph != self.id {
            return Err(Error::Graph("variable belongs to a different graph".into()));
        }
        if v.id >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node id {}", v.id)));
        }
        Ok(())
    }
}

/// Gradients of the loss with respect to every `param` leaf of a graph.
pub struct Gradients<T: Scalar> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}
