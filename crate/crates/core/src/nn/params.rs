use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Named parameter tensors with Adam moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    index: HashMap<String, usize>,
    step: u64,
}

/// Gradients aligned with a [`ParamStore`] by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    values: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter. Replacing resets its moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        let (r, c) = value.shape();
        if let Some(&id) = self.index.get(&name) {
            self.values[id] = value;
            self.first_moment[id] = Matrix::zeros(r, c);
            self.second_moment[id] = Matrix::zeros(r, c);
            return id;
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.first_moment.push(Matrix::zeros(r, c));
        self.second_moment.push(Matrix::zeros(r, c));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn value(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.rows() * v.cols()).sum()
    }

    /// Applies one Adam update with bias correction and increments the step.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        if grads.values.len() != self.values.len() {
            return Err(Error::shape(
                "adam_step gradient count",
                self.values.len(),
                grads.values.len(),
            ));
        }
        for (id, g) in grads.values.iter().enumerate() {
            if g.shape() != self.values[id].shape() {
                return Err(Error::shape(
                    format!("adam_step gradient for {}", self.names[id]),
                    format!("{:?}", self.values[id].shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    iteration: self.step as usize,
                    message: format!("non-finite gradient for parameter {}", self.names[id]),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads.values.iter().enumerate() {
            let w = self.values[id].as_mut_slice();
            let m = self.first_moment[id].as_mut_slice();
            let v = self.second_moment[id].as_mut_slice();
            for k in 0..w.len() {
                let gk = g.as_slice()[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            values: params
                .values
                .iter()
                .map(|v| Matrix::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.values.iter()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.values {
            g.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("w", Matrix::filled(1, 1, w));
        ps
    }

    fn scalar_grad(ps: &ParamStore, g: f64) -> Gradients {
        let mut grads = Gradients::zeros_like(ps);
        grads.get_mut(0)[(0, 0)] = g;
        grads
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut ps = scalar_store(0.7);
        let g = scalar_grad(&ps, 0.0);
        ps.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(ps.get("w").unwrap()[(0, 0)], 0.7);
        assert_eq!(ps.step(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m1 = (1-b1) g, v1 = (1-b2) g^2; after bias correction the step is
        // lr * g / (|g| + eps).
        for g in [0.3, -2.5, 1e-3] {
            let cfg = AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            };
            let mut ps = scalar_store(1.0);
            ps.adam_step(&scalar_grad(&ps, g), &cfg).unwrap();
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((ps.get("w").unwrap()[(0, 0)] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut ps = scalar_store(-3.0);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..5 {
            ps.adam_step(&scalar_grad(&ps, 1.7), &cfg).unwrap();
        }
        assert_eq!(ps.get("w").unwrap()[(0, 0)], -3.0);
    }

    #[test]
    fn identical_stores_update_identically() {
        let mut a = scalar_store(0.1);
        let mut b = scalar_store(0.1);
        for g in [0.5, -0.25, 3.0] {
            a.adam_step(&scalar_grad(&a, g), &AdamConfig::default())
                .unwrap();
            b.adam_step(&scalar_grad(&b, g), &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut ps = scalar_store(0.0);
        let err = ps
            .adam_step(&scalar_grad(&ps, f64::NAN), &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("parameter w"));
        assert_eq!(ps.step(), 0);
    }
}
