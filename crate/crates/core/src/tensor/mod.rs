//! Dense f64 tensors with a reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable n-dimensional array (row-major, 64-bit). A
//! [`Tape`] records every differentiable operation applied to tracked tensors
//! as a node carrying a boxed backward rule; [`Tape::backward`] replays the
//! nodes in reverse, accumulating vector-Jacobian products. Tensors that never
//! touch a tape are plain shared buffers and are safe to move across threads;
//! parallel work owns disjoint tapes.

mod check;
mod ops;

pub use check::{grad_check, numeric_grad, GradCheckConfig, GradReport};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type NodeId = usize;

/// Immutable dense array with optional tape participation.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shapes(
                "tensor::new",
                format!("{} elements for shape {:?}", numel, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// Uniform random tensor in [lo, hi).
    pub fn rand_uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new((0..numel).map(|_| rng.range(lo, hi)).collect()),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shapes(
                "tensor::reshaped",
                format!("{} elements", self.numel()),
                format!("shape {:?} = {} elements", shape, numel),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    /// Detached copy: same data, no tape participation.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }
}

/// Receives gradient contributions during the reverse sweep. Contributions to
/// the same node sum, which is what shared parameters (the Siamese branches)
/// rely on.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    lens: &'a [usize],
}

impl GradSink<'_> {
    /// Accumulate `contribution` into the gradient of `node`.
    pub fn accumulate(&mut self, node: NodeId, contribution: &[f64]) {
        debug_assert_eq!(contribution.len(), self.lens[node]);
        let slot = self.grads[node].get_or_insert_with(|| vec![0.0; self.lens[node]]);
        for (g, c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Hand a full gradient buffer to `node`, avoiding a copy when the slot is
    /// still empty.
    pub fn accumulate_owned(&mut self, node: NodeId, contribution: Vec<f64>) {
        debug_assert_eq!(contribution.len(), self.lens[node]);
        match &mut self.grads[node] {
            Some(slot) => {
                for (g, c) in slot.iter_mut().zip(&contribution) {
                    *g += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// A backward rule: consumes the output cotangent, pushes input cotangents.
/// Rules own whatever forward state they need (inputs are `Arc`-shared, so
/// saving them is free).
pub trait Backward: Send {
    fn backward(&self, grad_out: &[f64], sink: &mut GradSink);
}

struct Node {
    len: usize,
    rule: Option<Box<dyn Backward>>, // None for leaves
}

/// Gradient tape. Built eagerly during the forward pass, consumed by
/// [`Tape::backward`]. One tape per training step; parallel callers own
/// disjoint tapes.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that records nothing; ops run forward-only. Used for inference
    /// and for the finite-difference probes of the gradient checker.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register `t` as a gradient-receiving leaf and return the tracked handle.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            len: t.numel(),
            rule: None,
        });
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(id),
        }
    }

    /// Record an op output. Returns a tracked tensor when the tape is
    /// recording and `rule` is supplied; plain data otherwise.
    pub(crate) fn emit(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        rule: Option<Box<dyn Backward>>,
    ) -> Tensor {
        self.emit_arc(shape, Arc::new(data), rule)
    }

    pub(crate) fn emit_arc(
        &mut self,
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        rule: Option<Box<dyn Backward>>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let node = match (self.recording, rule) {
            (true, Some(rule)) => {
                let id = self.nodes.len();
                self.nodes.push(Node {
                    len: data.len(),
                    rule: Some(rule),
                });
                Some(id)
            }
            _ => None,
        };
        Tensor { shape, data, node }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; every tracked leaf
    /// reachable from `loss` ends up with its gradient in the returned map.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        if !loss.item().is_finite() {
            return Err(Error::NonFinite {
                op: "backward(loss)".into(),
            });
        }
        let node = loss.node().ok_or_else(|| {
            Error::contract("backward", "loss is not on this tape (untracked tensor)")
        })?;
        self.backward_seeded(vec![(node, vec![1.0])])
    }

    /// Reverse sweep from explicit cotangent seeds. Used by the trainer to
    /// inject the batch-level DCCA gradient into per-sample tapes alongside
    /// the per-sample scalar losses.
    pub fn backward_seeded(mut self, seeds: Vec<(NodeId, Vec<f64>)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (node, seed) in seeds {
            if node >= self.nodes.len() {
                return Err(Error::contract("backward", "seed node is not on this tape"));
            }
            if seed.len() != self.nodes[node].len {
                return Err(Error::shapes(
                    "backward",
                    format!("{} cotangent elements", self.nodes[node].len),
                    format!("{}", seed.len()),
                ));
            }
            start = start.max(node);
            match &mut grads[node] {
                Some(slot) => {
                    for (g, s) in slot.iter_mut().zip(&seed) {
                        *g += s;
                    }
                }
                slot @ None => *slot = Some(seed),
            }
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.len).collect();
        for id in (0..=start).rev() {
            let Some(rule) = self.nodes[id].rule.take() else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(grad_out) = grads[id].take() else {
                continue; // not reachable from any seed
            };
            let (done, rest) = grads.split_at_mut(id);
            let _ = rest;
            let mut sink = GradSink {
                grads: done,
                lens: &lens[..id],
            };
            rule.backward(&grad_out, &mut sink);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tracked tensor, if it received one.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node()
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        t.node().and_then(|id| self.grads.get_mut(id)).and_then(Option::take)
    }
}
