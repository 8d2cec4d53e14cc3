//! Named model parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique parameter identity, used to route gradients back from a
/// tape to the owning parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u64);

/// A leaf tensor owned by a model. Frozen parameters (`trainable == false`)
/// never enter the tape, so they can never receive gradients.
#[derive(Clone, Debug)]
pub struct Param<P: Real> {
    id: ParamId,
    name: String,
    value: Tensor<P>,
    trainable: bool,
}

impl<P: Real> Param<P> {
    pub fn new(name: impl Into<String>, value: Tensor<P>, trainable: bool) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            trainable,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<P> {
        &self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Replace the value (optimizer update). Shape must be preserved.
    pub fn set_value(&mut self, value: Tensor<P>) {
        assert_eq!(self.value.shape(), value.shape(), "param shape changed");
        self.value = value;
    }
}
