use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Flat, named collection of trainable tensors. Models refer to entries by
/// index so that binding to a tape and optimizer updates are uniform.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    tensors: Vec<Tensor<S>>,
    names: Vec<String>,
    decay: Vec<bool>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
            decay: Vec::new(),
        }
    }

    /// Adds a tensor. Matrices receive weight decay, vectors do not.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> usize {
        self.decay.push(tensor.rank() >= 2);
        self.tensors.push(tensor);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<S> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decay_flags(&self) -> &[bool] {
        &self.decay
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    /// Replaces the tensor at `idx`, keeping its name and shape.
    pub fn set(&mut self, idx: usize, tensor: Tensor<S>) -> Result<()> {
        if tensor.shape() != self.tensors[idx].shape() {
            return Err(Error::shape("param set", self.tensors[idx].shape(), tensor.shape()));
        }
        self.tensors[idx] = tensor;
        Ok(())
    }
}

pub(crate) fn normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    // Truncate at two standard deviations.
    let data = (0..numel)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break S::of(v);
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
