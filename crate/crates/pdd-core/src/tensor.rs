//! Dense tensors with shared immutable storage.
//!
//! A `Tensor` is a shape plus a contiguous row-major value buffer behind an
//! `Arc`. Values never mutate after construction; ops return new tensors.
//! When a tensor participates in the differentiable part of a forward pass
//! it carries the id of the tape node that produced it (see `tape`).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::NodeId;

#[derive(Clone, Debug)]
pub struct Tensor<P: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<P>>,
    node: Option<NodeId>,
}

impl<P: Real> Tensor<P> {
    /// Build a tensor, validating that the shape matches the buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<P>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![P::ZERO; numel]),
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: P) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: P) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> P {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Whether this tensor is on the differentiable path of the live tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// Same values, no tape attachment.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn share_data(&self) -> Arc<Vec<P>> {
        Arc::clone(&self.data)
    }


    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// [N, C, H, W] accessor with a shape error naming the op.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::shape(op, format!("expected 4-d tensor, got {other:?}"))),
        }
    }

    /// Concatenate along axis 0. Inputs must agree on trailing dims.
    pub fn concat0(parts: &[&Tensor<P>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat0", "empty input list"))?;
        let tail = &first.shape[1..];
        let mut n0 = 0;
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::shape(
                    "concat0",
                    format!("incompatible shapes {:?} vs {:?}", first.shape, p.shape),
                ));
            }
            n0 += p.shape[0];
        }
        let mut data = Vec::with_capacity(n0 * tail.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![n0];
        shape.extend_from_slice(tail);
        Tensor::from_vec(shape, data)
    }

    /// Convert precision elementwise.
    pub fn cast<Q: Real>(&self) -> Tensor<Q> {
        let data: Vec<Q> = self.data.iter().map(|v| Q::from_f64(v.to_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
        }
    }
}

/// The four per-stage feature maps of an encoder or decoder, shallow to deep.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<P: Real> {
    stages: [Tensor<P>; 4],
}

impl<P: Real> FeaturePyramid<P> {
    pub fn new(stages: [Tensor<P>; 4]) -> Self {
        FeaturePyramid { stages }
    }

    /// 1-based stage accessor (stage 1 = shallowest).
    pub fn stage(&self, i: usize) -> &Tensor<P> {
        assert!((1..=4).contains(&i), "stage index {i} out of [1,4]");
        &self.stages[i - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<P>> {
        self.stages.iter()
    }

    pub fn map<F: FnMut(usize, &Tensor<P>) -> Result<Tensor<P>>>(
        &self,
        mut f: F,
    ) -> Result<FeaturePyramid<P>> {
        let mut out = Vec::with_capacity(4);
        for (idx, t) in self.stages.iter().enumerate() {
            out.push(f(idx + 1, t)?);
        }
        let arr: [Tensor<P>; 4] = out.try_into().expect("four stages");
        Ok(FeaturePyramid::new(arr))
    }

    /// Stage-wise shape equality check.
    pub fn shapes_match(&self, other: &FeaturePyramid<P>) -> bool {
        self.stages
            .iter()
            .zip(other.stages.iter())
            .all(|(a, b)| a.shape() == b.shape())
    }
}
