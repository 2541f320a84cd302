//! Learnable tensors and the named-state traversal shared by the optimizer,
//! the weight container and the parameter counter.

use crate::layers::bifc::BinaryWeight;
use crate::tensor::{to_storage, FloatTensor};

/// A learnable tensor with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: FloatTensor,
    /// Same length as `value` once allocated; empty for inference-only models.
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: FloatTensor) -> Self {
        Self { value, grad: Vec::new() }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::new(FloatTensor::full(shape, to_storage(v)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.zero_grad();
        }
        &mut self.grad
    }

    pub fn accumulate(&mut self, g: &[f64]) {
        for (a, b) in self.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Read-only view of one named piece of model state.
pub enum StateRef<'a> {
    Param(&'a Param),
    /// Non-learnable real tensor (batch-norm running statistics).
    Buffer(&'a FloatTensor),
    Binary(&'a BinaryWeight),
}

pub enum StateMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut FloatTensor),
    Binary(&'a mut BinaryWeight),
}

/// Anything owning named state.
pub trait Stateful {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>);
    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>);

    /// Every learnable tensor, binary latent weights included.
    fn params_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Param)> {
        let mut all = Vec::new();
        self.state_mut(prefix, &mut all);
        all.into_iter()
            .filter_map(|(name, s)| match s {
                StateMut::Param(p) => Some((name, p)),
                StateMut::Binary(b) => b.latent.as_mut().map(|p| (name, p)),
                StateMut::Buffer(_) => None,
            })
            .collect()
    }

    /// Learnable element count. Binary layers count their weight matrix
    /// whether or not the latent copy is resident.
    fn num_params(&self) -> usize {
        let mut all = Vec::new();
        self.state("", &mut all);
        all.iter()
            .map(|(_, s)| match s {
                StateRef::Param(p) => p.len(),
                StateRef::Binary(b) => b.d_in() * b.d_out(),
                StateRef::Buffer(_) => 0,
            })
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
