use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A trainable tensor with a process-unique identity.
///
/// The identity is what ties a tape leaf back to the parameter after a
/// backward pass; clones share it.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(mut value: Tensor) -> Self {
        value.requires_grad = true;
        Self {
            id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.value.grad = None;
    }
}
