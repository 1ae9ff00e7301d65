use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
    pub grad_norm_clip: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, alpha: 0.99, eps: 1e-5, grad_norm_clip: 10.0 }
    }
}

/// RMSProp with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    accumulators: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParamStore) -> Self {
        let accumulators = params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { config, accumulators }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    pub fn set_accumulators(&mut self, acc: Vec<Tensor>) -> Result<()> {
        if acc.len() != self.accumulators.len()
            || acc.iter().zip(&self.accumulators).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("optimizer accumulator layout".into()));
        }
        self.accumulators = acc;
        Ok(())
    }

    /// Applies one update from the gradients held in `params` and returns the
    /// pre-clip global gradient norm. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        if params.len() != self.accumulators.len() {
            return Err(Error::Shape("optimizer built for a different parameter set".into()));
        }
        for e in params.entries() {
            if let Some(pos) = e.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in parameter `{}` at element {pos}",
                    e.name
                )));
            }
        }
        let norm = params.grad_sq_norm().sqrt();
        let clip = if norm > self.config.grad_norm_clip { self.config.grad_norm_clip / norm } else { 1.0 };
        let RmsPropConfig { learning_rate, alpha, eps, .. } = self.config;
        for (e, acc) in params.entries_mut().iter_mut().zip(&mut self.accumulators) {
            let grads = e.grad.data();
            let values = e.value.data_mut();
            for ((p, a), &g) in values.iter_mut().zip(acc.data_mut()).zip(grads) {
                let g = g * clip;
                *a = alpha * *a + (1.0 - alpha) * g * g;
                *p -= learning_rate * g / (a.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![value]));
        store.accumulate_grad(id, &[grad]);
        store
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store = single(1.25, 0.0);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &store);
        opt.step(&mut store).unwrap();
        assert_eq!(store.entries()[0].value.data(), &[1.25]);
    }

    #[test]
    fn scalar_update_matches_hand_arithmetic() {
        let mut store = single(0.0, 1.0);
        let cfg = RmsPropConfig { learning_rate: 0.1, alpha: 0.99, eps: 1e-5, grad_norm_clip: 10.0 };
        let mut opt = RmsProp::new(cfg, &store);
        opt.step(&mut store).unwrap();
        let expected = -0.1 * 1.0 / (0.01f64.sqrt() + 1e-5);
        assert!((store.entries()[0].value.data()[0] - expected).abs() < 1e-15);
        assert!(opt.accumulators()[0].data()[0] >= 0.0);
    }

    #[test]
    fn clipping_halves_gradients_at_twice_the_threshold() {
        // grads (12, 16): norm 20, clip 10 -> effective (6, 8)
        let mut clipped = ParamStore::new();
        let id = clipped.add("p", Tensor::vector(vec![0.0, 0.0]));
        clipped.accumulate_grad(id, &[12.0, 16.0]);
        let mut reference = ParamStore::new();
        let rid = reference.add("p", Tensor::vector(vec![0.0, 0.0]));
        reference.accumulate_grad(rid, &[6.0, 8.0]);
        let cfg = RmsPropConfig { grad_norm_clip: 10.0, ..Default::default() };
        let norm = RmsProp::new(cfg, &clipped).step(&mut clipped).unwrap();
        let cfg_big = RmsPropConfig { grad_norm_clip: 1e9, ..Default::default() };
        RmsProp::new(cfg_big, &reference).step(&mut reference).unwrap();
        assert!((norm - 20.0).abs() < 1e-12);
        for (a, b) in clipped.entries()[0].value.data().iter().zip(reference.entries()[0].value.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut store = single(0.0, f64::NAN);
        let err = RmsProp::new(RmsPropConfig::default(), &store).step(&mut store).unwrap_err();
        assert!(err.to_string().contains("divergence"));
    }
}
