//! Named parameter storage shared by every layer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered collection of named, trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..n).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        self.add(name, Tensor::from_raw(shape.to_vec(), data))
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_raw(shape.to_vec(), data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].data_mut()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            bufs: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        for (a, g) in self.bufs[id.0].iter_mut().zip(grad) {
            *a += g;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bufs
            .iter()
            .enumerate()
            .map(|(i, b)| (ParamId(i), b.as_slice()))
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|v| v.is_finite())
    }
}
