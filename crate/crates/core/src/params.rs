//! Named parameter tensors and their gradient buffers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    ns: u32,
    idx: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.idx
    }

    /// Namespace of the owning store; lets several stores share one graph.
    pub fn namespace(self) -> u32 {
        self.ns
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    ns: u32,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores bound into the same graph need distinct namespaces.
    pub fn with_namespace(ns: u32) -> Self {
        ParamStore {
            ns,
            ..Self::default()
        }
    }

    pub fn namespace(&self) -> u32 {
        self.ns
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId {
            ns: self.ns,
            idx: self.values.len() - 1,
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Add independent `N(0, std^2)` noise to every parameter entry.
    pub fn jitter(&mut self, rng: &mut Rng, std: f64) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|e| *e += std * rng.normal());
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.idx]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.idx]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.idx]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        let ns = self.ns;
        (0..self.values.len()).map(move |idx| ParamId { ns, idx })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|idx| ParamId { ns: self.ns, idx })
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrite values from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::contract(format!(
                "parameter count mismatch: {} stored, {} expected",
                entries.len(),
                self.values.len()
            )));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::contract(format!("parameter {name} does not match {}", self.names[i])));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

pub const VAE_NAMESPACE: u32 = 1;
pub const FLOW_NAMESPACE: u32 = 2;

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(store.values.iter().map(|t| vec![0.0; t.numel()]).collect())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.idx]
    }

    pub(crate) fn add_slice(&mut self, id: ParamId, g: &[f64]) {
        self.0[id.idx].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    /// Elementwise accumulate; `other` must come from the same store layout.
    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}
