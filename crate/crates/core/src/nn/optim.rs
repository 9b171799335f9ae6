use std::collections::HashMap;

use super::Var;
use crate::tensor::GradStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over a fixed list of named parameters.
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Var)>,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Adam {
        Adam { cfg, params, moments: HashMap::new(), steps: 0 }
    }

    /// One update from `grads`; parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, var) in &self.params {
            let current = var.tensor();
            let Some(g) = grads.get(&current) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let mut values = current.to_vec();
            for (((p, gi), mi), vi) in values.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            var.set(values);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};

    #[test]
    fn minimises_a_quadratic() {
        let store = ParamStore::new(0);
        let w = store.root().param("w", &[2], Init::Const(3.0));
        let mut opt = Adam::new(store.trainable(), AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..300 {
            let loss = w.tensor().add_scalar(-1.0).sqr().sum_all();
            opt.step(&loss.backward());
        }
        assert!(w.values().iter().all(|v| (v - 1.0).abs() < 1e-2));
    }
}
