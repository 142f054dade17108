use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the step counter and updates every parameter in `store`.
    /// Names listed in `frozen` are left untouched.
    pub fn step(&mut self, store: &mut ParameterStore, cfg: &AdamConfig, frozen: &dyn Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step;
        for (name, p) in store.iter_mut() {
            if frozen(name) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            adam_update(p.value.data_mut(), p.grad.data(), m.data_mut(), v.data_mut(), cfg, t);
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`θ ← θ − lr·wd·θ` before the moment step) at step `t ≥ 1`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, t: u64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= cfg.lr * cfg.weight_decay * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let mut store = scalar_store(0.0, 1.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        AdamState::new().step(&mut store, &cfg, &|_| false);
        let w = store.value("w").unwrap().data()[0];
        assert!((w - (-0.002 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(0.7, 0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new();
        for _ in 0..5 {
            state.step(&mut store, &cfg, &|_| false);
        }
        assert_eq!(store.value("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn identical_stores_stay_identical() {
        let mut a = scalar_store(0.3, -0.5);
        let mut b = a.clone();
        let cfg = AdamConfig::default();
        let (mut sa, mut sb) = (AdamState::new(), AdamState::new());
        for _ in 0..3 {
            sa.step(&mut a, &cfg, &|_| false);
            sb.step(&mut b, &cfg, &|_| false);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = scalar_store(1.0, 0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        AdamState::new().step(&mut store, &cfg, &|_| false);
        assert!((store.value("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = scalar_store(0.0, 1.0);
        AdamState::new().step(&mut store, &AdamConfig::default(), &|n| n == "w");
        assert_eq!(store.value("w").unwrap().data()[0], 0.0);
    }
}
