use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// First/second moments per parameter.
///
/// Each parameter carries its own step count so that parameters added
/// mid-run get correct bias correction from their first update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, Moments>,
    /// Number of `adam_step` calls applied through this state.
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.v.as_slice())
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }
}

/// One Adam update with L2 weight decay folded into the gradient.
///
/// Parameters flagged non-trainable are skipped entirely, so their values
/// stay bitwise identical whatever their gradient slot holds.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let trainable: Vec<String> = params
        .names()
        .filter(|n| params.is_trainable(n))
        .map(str::to_string)
        .collect();
    for name in &trainable {
        if params.get(name)?.grad().is_none() {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    for name in trainable {
        let tensor = params.get_mut(&name)?;
        let len = tensor.len();
        let grad = tensor.grad().expect("checked above").to_vec();
        let mom = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        });
        mom.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(mom.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(mom.steps as i32);
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i] + cfg.weight_decay * *w;
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    state.t += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.5), true);
        p.get_mut("x").unwrap().set_grad(vec![1.0]).unwrap();
        let mut s = AdamState::new();
        adam_step(&mut p, &mut s, 0.1, &no_decay()).unwrap();
        // m_hat = 1, v_hat = 1  ->  step = 0.1 / (1 + 1e-8)
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut p = ParamStore::new();
        p.insert("frozen", Tensor::new(&[2], vec![0.3, -1.7]).unwrap(), false);
        p.insert("live", Tensor::scalar(0.0), true);
        p.get_mut("frozen").unwrap().set_grad(vec![5.0, -3.0]).unwrap();
        p.get_mut("live").unwrap().set_grad(vec![1.0]).unwrap();
        let before = p.get("frozen").unwrap().data().to_vec();
        let mut s = AdamState::new();
        for _ in 0..10 {
            adam_step(&mut p, &mut s, 0.1, &AdamConfig::default()).unwrap();
        }
        let after = p.get("frozen").unwrap().data();
        assert!(before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(!s.tracks("frozen"));
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        p.get_mut("x").unwrap().set_grad(vec![0.0; 3]).unwrap();
        let mut s = AdamState::new();
        adam_step(&mut p, &mut s, 0.1, &no_decay()).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(2.0), true);
        p.get_mut("x").unwrap().set_grad(vec![0.0]).unwrap();
        let mut s = AdamState::new();
        adam_step(&mut p, &mut s, 0.01, &AdamConfig::default()).unwrap();
        // Decay-only gradient 2e-4 normalizes to a full lr-sized step.
        let x = p.get("x").unwrap().item();
        assert!(x < 2.0 && (x - (2.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0), true);
        let mut s = AdamState::new();
        let err = adam_step(&mut p, &mut s, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "x"));
    }
}
