//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and what it needs for the
//! backward pass. Nodes are appended after their inputs, so walking the tape
//! backwards is a reverse topological order. A tape lives for one forward pass
//! (one training step); parameters are copied in as leaves and their gradients
//! read back out afterwards.

pub(crate) mod kernels;
mod ops;

pub use ops::AttentionOutput;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour of mode-dependent layers (batch norm).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
    },
    MaxPool2 {
        x: VarId,
        argmax: Vec<usize>,
    },
    Relu(VarId),
    LeakyRelu(VarId, T),
    Sigmoid(VarId),
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    ConcatChannels(VarId, VarId),
    SliceChannels {
        x: VarId,
        start: usize,
    },
    Add(VarId, VarId),
    Scale(VarId, T),
    MulScalar {
        x: VarId,
        s: VarId,
    },
    AddChannelBias {
        x: VarId,
        bias: VarId,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Bmm {
        a: VarId,
        b: VarId,
        ta: bool,
        tb: bool,
    },
    Softmax(VarId),
    Reshape(VarId),
    Sum(VarId),
    Mean(VarId),
    L1 {
        pred: VarId,
        target: VarId,
    },
    Mse {
        pred: VarId,
        target: VarId,
    },
    BceWithLogits {
        logits: VarId,
        labels: VarId,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Record of executed operations for one forward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf without gradient (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if any reached this node.
    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Scalar read of a one-element node.
    pub fn item(&self, id: VarId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> VarId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    /// Back-propagate from a scalar loss.
    ///
    /// Gradients accumulate into every node on the path that requires grad.
    /// A tape can only be differentiated once.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::arg(
                "backward already ran on this tape; record a fresh forward pass",
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            log::warn!("backward on a loss with no trainable inputs; nothing to do");
            return Ok(());
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g)?;
            self.grads[i] = Some(g);
            for (target, delta) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.grads[target.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }
}

/// Split a `[B, C, H, W]` tensor into its first `first` channels and the rest.
pub fn split_channels<T: Element>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = x.dims4()?;
    if first > c {
        return Err(Error::shape(format!("cannot split {first} of {c} channels")));
    }
    let plane = h * w;
    let mut lo = Vec::with_capacity(b * first * plane);
    let mut hi = Vec::with_capacity(b * (c - first) * plane);
    for item in x.data().chunks(c * plane) {
        lo.extend_from_slice(&item[..first * plane]);
        hi.extend_from_slice(&item[first * plane..]);
    }
    Ok((
        Tensor::new(vec![b, first, h, w], lo)?,
        Tensor::new(vec![b, c - first, h, w], hi)?,
    ))
}

#[cfg(test)]
mod tests;
