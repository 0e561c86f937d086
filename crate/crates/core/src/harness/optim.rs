//! AdamW with decoupled weight decay, and the cosine annealing schedule.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::store::{ParamId, ParamRole, ParamStore};

/// Cosine annealing from `lr0` at step 0 to 0 at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step as f64 / total as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW over the store's trainable mask. Decoupled weight decay applies
/// to multiplicative weights only — biases, norm parameters, and
/// embeddings (prompts, prefixes, positions) are never decayed.
#[derive(Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// One update over every trainable parameter carrying a gradient.
    /// Returns the global gradient norm (for divergence diagnostics).
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<f64> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.trainable_ids().cloned().collect();
        let mut sq_norm = 0.0;
        for id in ids {
            let role = store.role(&id)?;
            let tensor = store.tensor_mut(&id)?;
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            sq_norm += grad.iter().map(|g| g * g).sum::<f64>();
            let m = self.m.entry(id.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(id.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                if role == ParamRole::Weight {
                    data[i] -= lr * self.weight_decay * data[i];
                }
            }
        }
        Ok(sq_norm.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_schedule_endpoints_and_monotonicity() {
        assert_eq!(cosine_lr(0, 10, 0.01), 0.01);
        assert!(cosine_lr(10, 10, 0.01).abs() < 1e-18);
        let mut last = f64::INFINITY;
        for t in 0..=10 {
            let lr = cosine_lr(t, 10, 0.01);
            assert!(lr <= last + 1e-15);
            last = lr;
        }
    }

    fn store_with(id: &str, value: f64, role: ParamRole) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(id, Tensor::new(vec![value], &[1]).unwrap(), role).unwrap();
        s.mark_trainable(id).unwrap();
        s
    }

    #[test]
    fn quadratic_descends_toward_zero() {
        // f(w) = w^2 / 2, grad = w
        let mut store = store_with("w", 1.0, ParamRole::Embedding);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        let w0 = store.tensor("w").unwrap().data()[0];
        store.tensor_mut("w").unwrap().set_grad(vec![w0]);
        opt.step(&mut store, 0.1).unwrap();
        let w1 = store.tensor("w").unwrap().data()[0];
        assert!(w1 < w0 && w1 > 0.0 - 0.2, "{w0} -> {w1}");
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut store = store_with("w", 2.0, ParamRole::Weight);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        store.tensor_mut("w").unwrap().set_grad(vec![0.0]);
        let lr = 0.05;
        opt.step(&mut store, lr).unwrap();
        let w = store.tensor("w").unwrap().data()[0];
        assert!((w - 2.0 * (1.0 - lr * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn bias_and_norm_params_are_never_decayed() {
        for role in [ParamRole::Bias, ParamRole::NormScale, ParamRole::NormShift, ParamRole::Embedding] {
            let mut store = store_with("p", 2.0, role);
            let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
            store.tensor_mut("p").unwrap().set_grad(vec![0.0]);
            opt.step(&mut store, 0.05).unwrap();
            assert_eq!(store.tensor("p").unwrap().data()[0], 2.0);
        }
    }

    #[test]
    fn params_without_grads_are_skipped() {
        let mut store = store_with("w", 1.5, ParamRole::Weight);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        let norm = opt.step(&mut store, 0.05).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(store.tensor("w").unwrap().data()[0], 1.5);
    }
}
