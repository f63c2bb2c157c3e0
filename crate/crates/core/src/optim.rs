//! Adam over a named parameter store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::layers::ParamStore;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient entry are
    /// left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let pd = p.as_mut_slice();
            for (((pi, gi), mi), vi) in pd.iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut g = ParamStore::new();
        g.insert("w", Matrix::from_vec(1, 2, vec![3.0, -0.5]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &g);
        let w = p.get("w").unwrap();
        assert!((w[(0, 0)] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[(0, 1)] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Matrix::from_vec(1, 1, vec![5.0]));
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        for _ in 0..500 {
            let x = p.get("x").unwrap()[(0, 0)];
            let mut g = ParamStore::new();
            g.insert("x", Matrix::from_vec(1, 1, vec![2.0 * (x - 2.0)]));
            opt.step(&mut p, &g);
        }
        assert!((p.get("x").unwrap()[(0, 0)] - 2.0).abs() < 1e-2);
    }
}
