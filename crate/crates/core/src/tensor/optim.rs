use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |p: &super::Param<T>| Tensor::zeros(p.value.shape());
        Adam {
            config,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let c = &self.config;
        if c.lr <= 0.0 || !c.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", c.lr)));
        }
        if self.m.len() != store.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{} moment slots for {} parameters", self.m.len(), store.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            if self.m[i].shape() != p.value.shape() {
                return Err(Error::dim("adam_step", format!("moment shape mismatch for {}", p.name)));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(1.5);
        let mut opt = Adam::new(&store, AdamConfig::default());
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(store.id("x").unwrap()).item(), 1.5);
    }

    #[test]
    fn one_step_on_square_moves_toward_zero() {
        // Hand simulation: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4,
        // x_new = 1 - 0.1 * 2 / (2 + 1e-8) ~= 0.9.
        let mut store = scalar_store(1.0);
        let id = store.id("x").unwrap();
        store.get_mut(id).grad = Tensor::scalar(2.0);
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        opt.step(&mut store).unwrap();
        let x = store.value(id).item();
        assert!(x.abs() < 1.0);
        assert!((x - 0.9).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut store = scalar_store(1.0);
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.0, ..AdamConfig::default() });
        assert!(opt.step(&mut store).is_err());
    }
}
