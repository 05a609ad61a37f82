use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Updates the parameters listed in `trainable`; every other parameter and
    /// its moments are left untouched. Fails before mutating anything if a
    /// trainable gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &Gradients,
        trainable: &[ParamId],
    ) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::shape("optimizer state", store.len(), grads.len()));
        }
        for &id in trainable {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(store.get(id).name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for &id in trainable {
            let g = grads.get(id);
            let m = &mut self.first[id];
            let v = &mut self.second[id];
            let data = &mut store.get_mut(id).data;
            for k in 0..data.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                data[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grads(store: &ParameterStore, center: &[f64]) -> (f64, Gradients) {
        let mut g = Gradients::zeros_like(store);
        let w = &store.get(0).data;
        let mut loss = 0.0;
        for (k, (wi, ci)) in w.iter().zip(center).enumerate() {
            let scale = (k + 1) as f64;
            loss += scale * (wi - ci).powi(2);
            g.get_mut(0)[k] = 2.0 * scale * (wi - ci);
        }
        (loss, g)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParameterStore::new();
        store.add("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Gradients::zeros_like(&store);
        adam.step(&mut store, &g, &[0]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParameterStore::new();
        store.add("w", vec![1], vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let (_, g) = quadratic_grads(&store, &[0.0]);
        adam.step(&mut store, &g, &[0]).unwrap();
        assert!(store.get(0).data[0] < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut store = ParameterStore::new();
        store.add("w", vec![3], vec![0.3, -0.2, 0.1]).unwrap();
        let center = [0.25, -0.1, 0.05];
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        let mut loss = f64::INFINITY;
        for _ in 0..500 {
            let (l, g) = quadratic_grads(&store, &center);
            loss = l;
            adam.step(&mut store, &g, &[0]).unwrap();
        }
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParameterStore::new();
        store.add("enc.w", vec![2], vec![0.0, 0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(0)[1] = f64::NAN;
        let err = adam.step(&mut store, &g, &[0]).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut store = ParameterStore::new();
        store.add("a", vec![1], vec![1.0]).unwrap();
        store.add("b", vec![1], vec![1.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(0)[0] = 1.0;
        g.get_mut(1)[0] = 1.0;
        adam.step(&mut store, &g, &[1]).unwrap();
        assert_eq!(store.get(0).data[0], 1.0);
        assert!(store.get(1).data[0] < 1.0);
    }
}
