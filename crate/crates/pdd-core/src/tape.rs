//! Reverse-mode differentiation tape.
//!
//! Ops append nodes in execution order; `backward` replays them in exact
//! reverse order, accumulating gradients additively. Only tensors derived
//! from watched leaves are recorded, so frozen teachers pass through as
//! constants without touching the tape.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::kernels::{self, ConvSpec};
use crate::param::{Param, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Value snapshot an op keeps for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct Saved<P: Real> {
    pub data: Arc<Vec<P>>,
    pub shape: Vec<usize>,
    pub node: Option<NodeId>,
}

impl<P: Real> Saved<P> {
    pub fn of(t: &Tensor<P>) -> Self {
        Saved {
            data: t.share_data(),
            shape: t.shape().to_vec(),
            node: t.node(),
        }
    }
    fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CosineAxis {
    /// One cosine per sample over all non-batch elements.
    Flat,
    /// One cosine per spatial position over the channel axis.
    Channel,
}

pub(crate) enum Back<P: Real> {
    Leaf,
    Conv2d {
        input: Saved<P>,
        weight: Saved<P>,
        bias_node: Option<NodeId>,
        bias_len: usize,
        spec: ConvSpec,
        dims: (usize, usize, usize, usize), // n, cin, h, w
        cout: usize,
        out_hw: (usize, usize),
        /// Per-sample im2col buffers saved by the forward pass.
        cols: Vec<P>,
    },
    BatchNorm {
        input: Saved<P>,
        gamma: Saved<P>,
        beta_node: Option<NodeId>,
        mean: Vec<P>,
        inv_std: Vec<P>,
    },
    Gelu {
        x_node: NodeId,
        deriv: Vec<P>,
    },
    Bilinear {
        input: Saved<P>,
        dims: (usize, usize, usize, usize),
        out_hw: (usize, usize),
    },
    Linear {
        input: Saved<P>,
        weight: Saved<P>,
        bias_node: Option<NodeId>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Cosine {
        a: Saved<P>,
        b: Saved<P>,
        axis: CosineAxis,
        /// Per-group (dot, ‖a‖, ‖b‖).
        stats: Vec<(P, P, P)>,
    },
    Mse {
        a: Saved<P>,
        b: Saved<P>,
    },
    Add {
        a_node: Option<NodeId>,
        b_node: Option<NodeId>,
        numel: usize,
    },
    Affine {
        x_node: NodeId,
        k: P,
        numel: usize,
    },
    Relu {
        input: Saved<P>,
    },
    MeanAll {
        x_node: NodeId,
        numel: usize,
    },
}

pub(crate) struct Node<P: Real> {
    pub back: Back<P>,
}

/// Gradient buffers produced by one backward pass.
pub struct Gradients<P: Real> {
    by_node: Vec<Option<Vec<P>>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<P: Real> Gradients<P> {
    fn empty() -> Self {
        Gradients {
            by_node: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Hand-built gradient table for unit tests.
    #[cfg(test)]
    pub(crate) fn synthetic(entries: Vec<(ParamId, Vec<P>)>) -> Self {
        let mut by_node = Vec::new();
        let mut param_nodes = HashMap::new();
        for (id, grad) in entries {
            param_nodes.insert(id, by_node.len());
            by_node.push(Some(grad));
        }
        Gradients {
            by_node,
            param_nodes,
        }
    }

    /// Gradient of the loss w.r.t. a tracked tensor, if any flowed to it.
    pub fn for_tensor(&self, t: &Tensor<P>) -> Option<&[P]> {
        let node = t.node()?;
        self.by_node.get(node)?.as_deref()
    }

    /// Gradient for a registered trainable parameter.
    pub fn for_param(&self, id: ParamId) -> Option<&[P]> {
        let node = *self.param_nodes.get(&id)?;
        self.by_node.get(node)?.as_deref()
    }
}

pub struct Tape<P: Real> {
    nodes: Vec<Node<P>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<P: Real> Default for Tape<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: Real> Tape<P> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn push(&mut self, back: Back<P>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { back });
        id
    }

    /// Watch an arbitrary tensor as a differentiable leaf (gradient checks,
    /// probes). Returns the tracked handle.
    pub fn watch(&mut self, t: &Tensor<P>) -> Tensor<P> {
        let id = self.push(Back::Leaf);
        t.detached().with_node(id)
    }

    /// Attach a model parameter. Trainable parameters become watched leaves
    /// (re-attaching the same parameter returns the same leaf so gradients
    /// pool in one buffer); frozen parameters stay constants.
    pub fn attach(&mut self, p: &Param<P>) -> Tensor<P> {
        if !p.trainable() {
            return p.value().detached();
        }
        if let Some(&node) = self.param_nodes.get(&p.id()) {
            return p.value().detached().with_node(node);
        }
        let id = self.push(Back::Leaf);
        self.param_nodes.insert(p.id(), id);
        p.value().detached().with_node(id)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively;
    /// a loss that never touched the tape yields empty gradients.
    pub fn backward(&self, loss: &Tensor<P>) -> Result<Gradients<P>> {
        if !loss.is_scalar() {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let Some(root) = loss.node() else {
            return Ok(Gradients::empty());
        };
        let mut grads: Vec<Option<Vec<P>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root] = Some(vec![P::ONE]);

        for id in (0..self.nodes.len()).rev() {
            if grads[id].is_none() {
                continue;
            }
            let (head, tail) = grads.split_at_mut(id);
            let gout = tail[0].as_ref().expect("checked above").clone();
            self.step_back(&self.nodes[id].back, &gout, head);
            // Keep leaf gradients; interior buffers can be dropped to bound memory.
            if !matches!(self.nodes[id].back, Back::Leaf) {
                tail[0] = None;
            }
        }

        Ok(Gradients {
            by_node: grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn step_back(&self, back: &Back<P>, gout: &[P], head: &mut [Option<Vec<P>>]) {
        match back {
            Back::Leaf => {}
            Back::Conv2d {
                input,
                weight,
                bias_node,
                bias_len,
                spec,
                dims,
                cout,
                out_hw,
                cols,
            } => {
                let (n, cin, h, w) = *dims;
                let (oh, ow) = *out_hw;
                // Borrow-split: compute into local buffers, then merge.
                let mut dx = input
                    .node
                    .map(|_| vec![P::ZERO; input.numel()]);
                let mut dw = weight
                    .node
                    .map(|_| vec![P::ZERO; weight.numel()]);
                let mut db = bias_node.map(|_| vec![P::ZERO; *bias_len]);
                kernels::conv2d_backward(
                    gout,
                    &input.data,
                    n,
                    cin,
                    h,
                    w,
                    &weight.data,
                    *cout,
                    spec,
                    oh,
                    ow,
                    (!cols.is_empty()).then_some(cols.as_slice()),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let (Some(node), Some(dx)) = (input.node, dx) {
                    accumulate(head, node, &dx);
                }
                if let (Some(node), Some(dw)) = (weight.node, dw) {
                    accumulate(head, node, &dw);
                }
                if let (Some(node), Some(db)) = (*bias_node, db) {
                    accumulate(head, node, &db);
                }
            }
            Back::BatchNorm {
                input,
                gamma,
                beta_node,
                mean,
                inv_std,
            } => {
                let c = mean.len();
                let spatial = input.numel() / input.shape[0] / c;
                let n = input.shape[0];
                if let Some(node) = input.node {
                    let buf = ensure(head, node, input.numel());
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = gamma.data[ci] * inv_std[ci];
                            let base = (ni * c + ci) * spatial;
                            for p in 0..spatial {
                                buf[base + p] += gout[base + p] * k;
                            }
                        }
                    }
                }
                if let Some(node) = gamma.node {
                    let buf = ensure(head, node, c);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            let mut s = P::ZERO;
                            for p in 0..spatial {
                                s += gout[base + p]
                                    * (input.data[base + p] - mean[ci])
                                    * inv_std[ci];
                            }
                            buf[ci] += s;
                        }
                    }
                }
                if let Some(node) = *beta_node {
                    let buf = ensure(head, node, c);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * spatial;
                            let mut s = P::ZERO;
                            for p in 0..spatial {
                                s += gout[base + p];
                            }
                            buf[ci] += s;
                        }
                    }
                }
            }
            Back::Gelu { x_node, deriv } => {
                let buf = ensure(head, *x_node, deriv.len());
                for i in 0..deriv.len() {
                    buf[i] += gout[i] * deriv[i];
                }
            }
            Back::Bilinear {
                input,
                dims,
                out_hw,
            } => {
                if let Some(node) = input.node {
                    let (n, c, h, w) = *dims;
                    let buf = ensure(head, node, input.numel());
                    kernels::bilinear_backward(gout, n, c, h, w, out_hw.0, out_hw.1, buf);
                }
            }
            Back::Linear {
                input,
                weight,
                bias_node,
                rows,
                din,
                dout,
            } => {
                if let Some(node) = input.node {
                    let buf = ensure(head, node, input.numel());
                    for r in 0..*rows {
                        let grow = &gout[r * dout..(r + 1) * dout];
                        let xrow = &mut buf[r * din..(r + 1) * din];
                        for (o, &gv) in grow.iter().enumerate() {
                            let wrow = &weight.data[o * din..(o + 1) * din];
                            for (x, &wv) in xrow.iter_mut().zip(wrow.iter()) {
                                *x += gv * wv;
                            }
                        }
                    }
                }
                if let Some(node) = weight.node {
                    let buf = ensure(head, node, weight.numel());
                    for r in 0..*rows {
                        let grow = &gout[r * dout..(r + 1) * dout];
                        let xrow = &input.data[r * din..(r + 1) * din];
                        for (o, &gv) in grow.iter().enumerate() {
                            let wrow = &mut buf[o * din..(o + 1) * din];
                            for (wslot, &xv) in wrow.iter_mut().zip(xrow.iter()) {
                                *wslot += gv * xv;
                            }
                        }
                    }
                }
                if let Some(node) = *bias_node {
                    let buf = ensure(head, node, *dout);
                    for r in 0..*rows {
                        for (o, slot) in buf.iter_mut().enumerate() {
                            *slot += gout[r * dout + o];
                        }
                    }
                }
            }
            Back::Cosine { a, b, axis, stats } => {
                let eps = P::from_f64(crate::ops::COS_EPS);
                let groups = stats.len();
                match axis {
                    CosineAxis::Flat => {
                        let d = a.numel() / groups;
                        for g in 0..groups {
                            let (s, na, nb) = stats[g];
                            let denom = na * nb + eps;
                            let gv = gout[g];
                            let ar = &a.data[g * d..(g + 1) * d];
                            let br = &b.data[g * d..(g + 1) * d];
                            if let Some(node) = a.node {
                                let coef = if na > P::ZERO {
                                    s * nb / (denom * denom * na)
                                } else {
                                    P::ZERO
                                };
                                let buf = ensure(head, node, a.numel());
                                let dst = &mut buf[g * d..(g + 1) * d];
                                for i in 0..d {
                                    dst[i] += gv * (br[i] / denom - coef * ar[i]);
                                }
                            }
                            if let Some(node) = b.node {
                                let coef = if nb > P::ZERO {
                                    s * na / (denom * denom * nb)
                                } else {
                                    P::ZERO
                                };
                                let buf = ensure(head, node, b.numel());
                                let dst = &mut buf[g * d..(g + 1) * d];
                                for i in 0..d {
                                    dst[i] += gv * (ar[i] / denom - coef * br[i]);
                                }
                            }
                        }
                    }
                    CosineAxis::Channel => {
                        let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
                        let hw = h * w;
                        for ni in 0..n {
                            for p in 0..hw {
                                let g = ni * hw + p;
                                let (s, na, nb) = stats[g];
                                let denom = na * nb + eps;
                                let gv = gout[g];
                                let idx = |ci: usize| (ni * c + ci) * hw + p;
                                if let Some(node) = a.node {
                                    let coef = if na > P::ZERO {
                                        s * nb / (denom * denom * na)
                                    } else {
                                        P::ZERO
                                    };
                                    let buf = ensure(head, node, a.numel());
                                    for ci in 0..c {
                                        let i = idx(ci);
                                        buf[i] += gv * (b.data[i] / denom - coef * a.data[i]);
                                    }
                                }
                                if let Some(node) = b.node {
                                    let coef = if nb > P::ZERO {
                                        s * na / (denom * denom * nb)
                                    } else {
                                        P::ZERO
                                    };
                                    let buf = ensure(head, node, b.numel());
                                    for ci in 0..c {
                                        let i = idx(ci);
                                        buf[i] += gv * (a.data[i] / denom - coef * b.data[i]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Back::Mse { a, b } => {
                let n = P::from_f64(a.numel() as f64);
                let two = P::from_f64(2.0);
                let g = gout[0];
                if let Some(node) = a.node {
                    let buf = ensure(head, node, a.numel());
                    for i in 0..a.numel() {
                        buf[i] += g * two * (a.data[i] - b.data[i]) / n;
                    }
                }
                if let Some(node) = b.node {
                    let buf = ensure(head, node, b.numel());
                    for i in 0..b.numel() {
                        buf[i] -= g * two * (a.data[i] - b.data[i]) / n;
                    }
                }
            }
            Back::Add {
                a_node,
                b_node,
                numel,
            } => {
                for node in [a_node, b_node].into_iter().flatten() {
                    let buf = ensure(head, *node, *numel);
                    for i in 0..*numel {
                        buf[i] += gout[i];
                    }
                }
            }
            Back::Affine { x_node, k, numel } => {
                let buf = ensure(head, *x_node, *numel);
                for i in 0..*numel {
                    buf[i] += gout[i] * *k;
                }
            }
            Back::Relu { input } => {
                if let Some(node) = input.node {
                    let buf = ensure(head, node, input.numel());
                    for i in 0..input.numel() {
                        if input.data[i] > P::ZERO {
                            buf[i] += gout[i];
                        }
                    }
                }
            }
            Back::MeanAll { x_node, numel } => {
                let buf = ensure(head, *x_node, *numel);
                let g = gout[0] / P::from_f64(*numel as f64);
                for slot in buf.iter_mut() {
                    *slot += g;
                }
            }
        }
    }
}

fn ensure<'a, P: Real>(head: &'a mut [Option<Vec<P>>], node: NodeId, numel: usize) -> &'a mut [P] {
    head[node]
        .get_or_insert_with(|| vec![P::ZERO; numel])
        .as_mut_slice()
}

fn accumulate<P: Real>(head: &mut [Option<Vec<P>>], node: NodeId, contribution: &[P]) {
    let buf = ensure(head, node, contribution.len());
    for (b, c) in buf.iter_mut().zip(contribution.iter()) {
        *b += *c;
    }
}
