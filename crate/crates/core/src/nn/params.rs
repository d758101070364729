//! Named parameter tensors with a fixed iteration order, plus AdamW.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::gaussian;

/// Ordered collection of named `Array2<f64>` tensors. Iteration order is
/// insertion order, which fixes gradient-reduction and optimizer order and
/// keeps training bit-reproducible.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Array2<f64>) {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter '{name}'"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    /// Gaussian init scaled by `std`.
    pub fn add_random<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
        let t = Array2::from_shape_fn((rows, cols), |_| gaussian(rng) * std);
        self.add(name, t);
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.add(name, Array2::zeros((rows, cols)));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(format!(
                    "parameter '{name}' contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect(),
            v: params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    /// One update; `grads` must be index-aligned with `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}
