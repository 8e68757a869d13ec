//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Each node caches its forward
//! value, so ids are topologically ordered by construction. [`Graph::backward`]
//! walks the list once in reverse, accumulating into per-node gradient slots
//! in a fixed order, which keeps repeated runs bitwise identical.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Silu(NodeId),
    Mse(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(NodeId, NodeId),
    Transpose(NodeId),
    AddRow(NodeId, NodeId),
    RowSums(NodeId),
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Mapping from parameter name to the leaf node holding it.
pub type Bindings = BTreeMap<String, NodeId>;

#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Tensor<S>>,
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Registers every entry of `params` as a leaf, trainable or frozen.
    pub fn bind(&mut self, params: &ParamSet<S>, trainable: bool) -> Bindings {
        params
            .iter()
            .map(|(name, t)| {
                let id = if trainable { self.param(t.clone()) } else { self.constant(t.clone()) };
                (name.clone(), id)
            })
            .collect()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        let v = self.value(a).scale(k);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, k), v, rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).silu();
        let rg = self.needs(&[a]);
        self.push(Op::Silu(a), v, rg)
    }

    /// Scalar mean of `(a - b)^2`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mse(self.value(b))?);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mse(a, b), v, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.needs(&[a]);
        self.push(Op::Mean(a), v, rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), v, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Transpose(a), v, rg))
    }

    /// Adds a bias vector to each row of a matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(bias))?;
        let rg = self.needs(&[a, bias]);
        Ok(self.push(Op::AddRow(a, bias), v, rg))
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).row_sums()?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::RowSums(a), v, rg))
    }

    /// Populates every gradient slot with d(loss)/d(node).
    ///
    /// Nodes the loss does not depend on (or that were built from constants
    /// only) end up with a zero gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut slots: Vec<Option<Tensor<S>>> = vec![None; n];
        slots[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                for (input, contrib) in self.local_grads(idx, &g)? {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    slots[input.0] = Some(match slots[input.0].take() {
                        Some(acc) => acc.add(&contrib)?,
                        None => contrib,
                    });
                }
            }
            slots[idx] = Some(g);
        }

        self.grads = slots
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
            .collect();
        Ok(())
    }

    /// Gradient slot of a node; `None` before [`Graph::backward`] has run.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0)
    }

    /// Collects the gradients of bound parameters into a [`ParamSet`].
    pub fn grads_for(&self, bindings: &Bindings) -> Result<ParamSet<S>> {
        let mut out = ParamSet::new();
        for (name, &id) in bindings {
            let g = self
                .grad(id)
                .ok_or_else(|| Error::Contract("gradients requested before backward".into()))?;
            out.insert(name.clone(), g.clone());
        }
        Ok(out)
    }

    // Reduce a gradient computed at the output shape back to an operand that
    // may have been scalar-broadcast.
    fn unbroadcast(g: Tensor<S>, operand: &Tensor<S>) -> Tensor<S> {
        if g.shape() == operand.shape() {
            g
        } else {
            Tensor::full(operand.shape(), g.sum())
        }
    }

    fn local_grads(&self, idx: usize, g: &Tensor<S>) -> Result<Vec<(NodeId, Tensor<S>)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let out = match &self.nodes[idx].op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose()?)?),
                (*b, val(*a).transpose()?.matmul(g)?),
            ],
            Op::Add(a, b) => vec![
                (*a, Self::unbroadcast(g.clone(), val(*a))),
                (*b, Self::unbroadcast(g.clone(), val(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, Self::unbroadcast(g.clone(), val(*a))),
                (*b, Self::unbroadcast(g.scale(-S::one()), val(*b))),
            ],
            Op::Mul(a, b) => vec![
                (*a, Self::unbroadcast(g.mul(val(*b))?, val(*a))),
                (*b, Self::unbroadcast(g.mul(val(*a))?, val(*b))),
            ],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Silu(a) => {
                let d = val(*a).map(|x| {
                    let s = x.sigmoid();
                    s * (S::one() + x * (S::one() - s))
                });
                vec![(*a, g.mul(&d)?)]
            }
            Op::Mse(a, b) => {
                let upstream = g.item()?;
                let n = S::of_usize(val(*a).len().max(1));
                let k = upstream * S::of(2.0) / n;
                let da = val(*a).sub(val(*b))?.scale(k);
                let db = da.scale(-S::one());
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()?))],
            Op::Mean(a) => {
                let n = S::of_usize(val(*a).len().max(1));
                vec![(*a, Tensor::full(val(*a).shape(), g.item()? / n))]
            }
            Op::ConcatCols(a, b) => {
                let (ga, gb) = g.split_cols(val(*a).cols())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::AddRow(a, bias) => {
                let gb = g.col_sums()?.reshape(val(*bias).shape().to_vec())?;
                vec![(*a, g.clone()), (*bias, gb)]
            }
            Op::RowSums(a) => vec![(*a, g.broadcast_cols(val(*a).cols())?)],
        };
        Ok(out)
    }
}
