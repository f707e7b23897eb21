//! Reverse-mode autodiff over an append-only arena. Nodes are created in
//! topological order by construction (an op can only reference existing
//! nodes), so the backward pass is a single reverse sweep. Parameter
//! gradients land in the shared store and accumulate across backward calls,
//! which lets several sampled networks contribute to one optimizer step.

use std::ops::Range;

use super::ops;
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    /// Constant leaf; never receives a gradient.
    Input,
    /// Leaf backed by (a slice of) a stored parameter.
    Param { key: String, slice: Option<Vec<Range<usize>>> },
    Conv2d { input: NodeId, weight: NodeId, stride: usize, pad: usize, groups: usize },
    /// Training-mode normalization; saves the batch statistics it used.
    NormTrain { input: NodeId, scale: NodeId, shift: NodeId, mean: Vec<T>, inv_std: Vec<T> },
    HardSwish { input: NodeId },
    Relu { input: NodeId },
    Add { a: NodeId, b: NodeId },
    GlobalAvgPool { input: NodeId, h: usize, w: usize },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    /// Weighted mean of per-row cross entropies: sum_i w_i * ce_i / denom.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, row_weights: Vec<T>, denom: T },
    Scale { input: NodeId, factor: T },
    AddN { inputs: Vec<NodeId> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use computation record: build forward, call [`Graph::backward`],
/// then drop it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    /// The forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.node(id).value
    }

    /// A constant leaf (e.g. an input batch).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// A trainable leaf reading `key` from the store, optionally restricted
    /// to a rectangular slice. Gradients scatter back through the slice.
    pub fn param(&mut self, store: &ParamStore<T>, key: &str, slice: Option<Vec<Range<usize>>>) -> Result<NodeId> {
        let value = store.value_slice(key, slice.as_deref())?;
        Ok(self.push(value, Op::Param { key: key.to_string(), slice }, true))
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, pad: usize, groups: usize) -> Result<NodeId> {
        let y = ops::conv2d_forward(&self.node(input).value, &self.node(weight).value, stride, pad, groups)?;
        let ng = self.node(input).needs_grad || self.node(weight).needs_grad;
        Ok(self.push(y, Op::Conv2d { input, weight, stride, pad, groups }, ng))
    }

    pub fn norm_train(&mut self, input: NodeId, scale: NodeId, shift: NodeId, eps: T) -> Result<NodeId> {
        let (y, mean, inv_std) =
            ops::bn_train_forward(&self.node(input).value, &self.node(scale).value, &self.node(shift).value, eps)?;
        let ng = self.node(input).needs_grad || self.node(scale).needs_grad || self.node(shift).needs_grad;
        Ok(self.push(y, Op::NormTrain { input, scale, shift, mean, inv_std }, ng))
    }

    pub fn hardswish(&mut self, input: NodeId) -> NodeId {
        let y = ops::hardswish_forward(&self.node(input).value);
        let ng = self.node(input).needs_grad;
        self.push(y, Op::HardSwish { input }, ng)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let y = ops::relu_forward(&self.node(input).value);
        let ng = self.node(input).needs_grad;
        self.push(y, Op::Relu { input }, ng)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        if ta.shape() != tb.shape() {
            return Err(Error::DimensionMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut y = ta.clone();
        for (o, &v) in y.data_mut().iter_mut().zip(tb.data()) {
            *o = *o + v;
        }
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.node(input).value.shape().to_vec();
        let y = ops::global_avg_pool_forward(&self.node(input).value)?;
        let ng = self.node(input).needs_grad;
        Ok(self.push(y, Op::GlobalAvgPool { input, h: shape[2], w: shape[3] }, ng))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = ops::linear_forward(
            &self.node(input).value,
            &self.node(weight).value,
            bias.map(|b| &self.node(b).value),
        )?;
        let mut ng = self.node(input).needs_grad || self.node(weight).needs_grad;
        if let Some(b) = bias {
            ng = ng || self.node(b).needs_grad;
        }
        Ok(self.push(y, Op::Linear { input, weight, bias }, ng))
    }

    /// Scalar loss: sum_i row_weights[i] * ce(logits_i, targets_i) / denom.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], row_weights: &[T], denom: T) -> Result<NodeId> {
        if denom <= T::zero() {
            return Err(Error::InvalidArgument("cross entropy denominator must be positive".into()));
        }
        let rows = self.node(logits).value.shape()[0];
        if row_weights.len() != rows {
            return Err(Error::DimensionMismatch {
                op: "cross entropy",
                detail: format!("{} rows vs {} weights", rows, row_weights.len()),
            });
        }
        let ce = ops::cross_entropy_rows(&self.node(logits).value, targets)?;
        let total: T = ce.iter().zip(row_weights).map(|(&c, &w)| c * w).sum();
        let value = Tensor::scalar(total / denom);
        let ng = self.node(logits).needs_grad;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
                denom,
            },
            ng,
        ))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, input: NodeId, factor: T) -> NodeId {
        let mut y = self.node(input).value.clone();
        for v in y.data_mut() {
            *v = *v * factor;
        }
        let ng = self.node(input).needs_grad;
        self.push(y, Op::Scale { input, factor }, ng)
    }

    /// Sum of several same-shaped tensors (typically scalar losses).
    pub fn add_n(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("add_n needs at least one input".into()));
        }
        let shape = self.node(inputs[0]).value.shape().to_vec();
        let mut y = Tensor::zeros(&shape);
        let mut ng = false;
        for &id in inputs {
            let t = &self.node(id).value;
            if t.shape() != shape.as_slice() {
                return Err(Error::DimensionMismatch {
                    op: "add_n",
                    detail: format!("{:?} vs {:?}", t.shape(), shape),
                });
            }
            for (o, &v) in y.data_mut().iter_mut().zip(t.data()) {
                *o = *o + v;
            }
            ng = ng || self.node(id).needs_grad;
        }
        Ok(self.push(y, Op::AddN { inputs: inputs.to_vec() }, ng))
    }

    /// Backpropagate from a scalar loss, accumulating parameter gradients
    /// into `store`. May be called for several losses on separate graphs
    /// before one optimizer step; gradients add up.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::DimensionMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.node(loss).value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(
            self.node(loss).value.shape(),
            vec![T::one()],
        )?);
        for idx in (0..=loss.0).rev() {
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { key, slice } => {
                    store.accumulate_grad(key, slice.as_deref(), &dy)?;
                }
                Op::Conv2d { input, weight, stride, pad, groups } => {
                    if self.node(*input).needs_grad {
                        let dx = ops::conv2d_backward_input(
                            &dy,
                            self.node(*input).value.shape(),
                            &self.node(*weight).value,
                            *stride,
                            *pad,
                            *groups,
                        )?;
                        accumulate(&mut grads[input.0], dx)?;
                    }
                    if self.node(*weight).needs_grad {
                        let dw = ops::conv2d_backward_weight(
                            &dy,
                            &self.node(*input).value,
                            self.node(*weight).value.shape(),
                            *stride,
                            *pad,
                            *groups,
                        )?;
                        accumulate(&mut grads[weight.0], dw)?;
                    }
                }
                Op::NormTrain { input, scale, shift, mean, inv_std } => {
                    let (dx, dscale, dshift) = ops::bn_train_backward(
                        &dy,
                        &self.node(*input).value,
                        &self.node(*scale).value,
                        mean,
                        inv_std,
                    )?;
                    if self.node(*input).needs_grad {
                        accumulate(&mut grads[input.0], dx)?;
                    }
                    if self.node(*scale).needs_grad {
                        accumulate(&mut grads[scale.0], dscale)?;
                    }
                    if self.node(*shift).needs_grad {
                        accumulate(&mut grads[shift.0], dshift)?;
                    }
                }
                Op::HardSwish { input } => {
                    let dx = ops::hardswish_backward(&self.node(*input).value, &dy);
                    accumulate(&mut grads[input.0], dx)?;
                }
                Op::Relu { input } => {
                    let dx = ops::relu_backward(&self.node(*input).value, &dy);
                    accumulate(&mut grads[input.0], dx)?;
                }
                Op::Add { a, b } => {
                    if self.node(*a).needs_grad {
                        accumulate(&mut grads[a.0], dy.clone())?;
                    }
                    if self.node(*b).needs_grad {
                        accumulate(&mut grads[b.0], dy.clone())?;
                    }
                }
                Op::GlobalAvgPool { input, h, w } => {
                    let dx = ops::global_avg_pool_backward(&dy, *h, *w)?;
                    accumulate(&mut grads[input.0], dx)?;
                }
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) =
                        ops::linear_backward(&dy, &self.node(*input).value, &self.node(*weight).value)?;
                    if self.node(*input).needs_grad {
                        accumulate(&mut grads[input.0], dx)?;
                    }
                    if self.node(*weight).needs_grad {
                        accumulate(&mut grads[weight.0], dw)?;
                    }
                    if let Some(b) = bias {
                        if self.node(*b).needs_grad {
                            accumulate(&mut grads[b.0], db)?;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, row_weights, denom } => {
                    let upstream = dy.item()?;
                    let probs = ops::softmax_rows(&self.node(*logits).value)?;
                    let (n, k) = (probs.shape()[0], probs.shape()[1]);
                    let mut dl = probs;
                    {
                        let d = dl.data_mut();
                        for ni in 0..n {
                            let coef = upstream * row_weights[ni] / *denom;
                            for ki in 0..k {
                                let onehot = if ki == targets[ni] { T::one() } else { T::zero() };
                                d[ni * k + ki] = coef * (d[ni * k + ki] - onehot);
                            }
                        }
                    }
                    accumulate(&mut grads[logits.0], dl)?;
                }
                Op::Scale { input, factor } => {
                    let mut dx = dy.clone();
                    for v in dx.data_mut() {
                        *v = *v * *factor;
                    }
                    accumulate(&mut grads[input.0], dx)?;
                }
                Op::AddN { inputs } => {
                    for id in inputs {
                        if self.node(*id).needs_grad {
                            accumulate(&mut grads[id.0], dy.clone())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => {
            *slot = Some(g);
            Ok(())
        }
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::DimensionMismatch {
                    op: "grad accumulate",
                    detail: format!("{:?} vs {:?}", acc.shape(), g.shape()),
                });
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
            Ok(())
        }
    }
}
