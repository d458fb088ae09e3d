use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Named parameters with matching gradient buffers. Iteration order is the
/// name order (BTreeMap), which keeps clipping, Adam and checkpoints
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    grads: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.insert(name.to_string(), value);
        self.grads.insert(name.to_string(), grad);
    }

    /// Seeded uniform init in [-scale, scale].
    pub fn insert_random(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale));
        self.insert(name, m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("gradient {name}")))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.grads
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("gradient {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn grads(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn grads_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.grads.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|m| m.rows() * m.cols()).sum()
    }
}
