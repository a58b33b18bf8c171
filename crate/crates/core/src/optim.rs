//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one slot per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        Self::for_sizes(store.entries().iter().map(|e| e.value.len()))
    }

    pub fn for_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn check(&self, sizes: &[usize]) -> Result<()> {
        if self.m.len() != sizes.len() || self.m.iter().zip(sizes).any(|(m, &n)| m.len() != n) {
            return Err(Error::UninitializedState);
        }
        Ok(())
    }

    /// Advances the step counter and applies one update to each `(param,
    /// grad)` slice pair, in slot order.
    pub fn update(&mut self, cfg: &AdamConfig, slots: &mut [(&mut [f64], &[f64])]) -> Result<()> {
        cfg.validate()?;
        let sizes: Vec<usize> = slots.iter().map(|(p, _)| p.len()).collect();
        self.check(&sizes)?;
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (slot, (param, grad)) in slots.iter_mut().enumerate() {
            apply_slot(cfg, bc1, bc2, &mut self.m[slot], &mut self.v[slot], param, grad);
        }
        Ok(())
    }
}

fn apply_slot(cfg: &AdamConfig, bc1: f64, bc2: f64, m: &mut [f64], v: &mut [f64], param: &mut [f64], grad: &[f64]) {
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        param[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
    }
}

/// One Adam step over every trainable parameter of `store`, using the
/// gradients currently in its slots. Frozen parameters are skipped.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    cfg.validate()?;
    let sizes: Vec<usize> = store.entries().iter().map(|e| e.value.len()).collect();
    state.check(&sizes)?;
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        let grad = store.get(id).grad.to_vec();
        let param = store.value_mut(id).data_mut();
        apply_slot(cfg, bc1, bc2, &mut state.m[slot], &mut state.v[slot], param, &grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![v]), true);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::for_store(&s);
        for _ in 0..5 {
            adam_step(&mut s, &AdamConfig::default(), &mut st).unwrap();
        }
        assert_eq!(s.by_name("x").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = −lr·1/(1+eps).
        let mut s = scalar_store(0.0);
        let id = s.id("x").unwrap();
        let mut st = AdamState::for_store(&s);
        s.zero_grads();
        s.accumulate_grad(id, &Tensor::vector(vec![1.0]));
        adam_step(&mut s, &AdamConfig::with_lr(0.1), &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.by_name("x").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn joint_update_equals_separate_updates() {
        let cfg = AdamConfig::with_lr(0.05);
        let grads = [[0.3, -1.2], [0.7, 0.1], [-0.4, 2.0]];
        let mut joint = [1.0, -2.0];
        let mut st = AdamState::for_sizes([2]);
        let mut a = [1.0];
        let mut b = [-2.0];
        let (mut sa, mut sb) = (AdamState::for_sizes([1]), AdamState::for_sizes([1]));
        for g in grads {
            st.update(&cfg, &mut [(&mut joint[..], &g[..])]).unwrap();
            sa.update(&cfg, &mut [(&mut a[..], &g[..1])]).unwrap();
            sb.update(&cfg, &mut [(&mut b[..], &g[1..])]).unwrap();
        }
        assert_eq!(joint, [a[0], b[0]]);
    }

    #[test]
    fn rejects_bad_lr_and_uninitialized_state() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::for_store(&s);
        assert!(adam_step(&mut s, &AdamConfig::with_lr(0.0), &mut st).is_err());
        let mut empty = AdamState::default();
        assert!(matches!(
            adam_step(&mut s, &AdamConfig::default(), &mut empty),
            Err(Error::UninitializedState)
        ));
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0]), true);
        let b = s.add("b", Tensor::vector(vec![1.0]), false);
        s.accumulate_grad(a, &Tensor::vector(vec![1.0]));
        s.accumulate_grad(b, &Tensor::vector(vec![1.0]));
        let mut st = AdamState::for_store(&s);
        adam_step(&mut s, &AdamConfig::default(), &mut st).unwrap();
        assert_eq!(s.by_name("b").unwrap().item(), 1.0);
        assert!(s.by_name("a").unwrap().item() < 1.0);
    }
}
