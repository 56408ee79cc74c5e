use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 100,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Classic momentum SGD with L2 weight decay folded into the gradient:
/// `g ← g + wd·θ; v ← m·v + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update and zeroes the gradients. A non-finite gradient
    /// aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        if self.velocity.len() != ids.len() {
            self.velocity = ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
            ..
        } = self.config;
        for (&id, vel) in ids.iter().zip(&mut self.velocity) {
            let (value, grad, decay) = store.value_and_grad_mut(id);
            let wd = if decay { weight_decay } else { 0.0 };
            for ((th, g), v) in value.iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
                let g_total = *g + wd * *th;
                *v = momentum * *v + g_total;
                *th -= lr * *v;
                *g = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", &[1], vec![value], true);
        s.grad_mut(id)[0] = grad;
        (s, id)
    }

    #[test]
    fn plain_gradient_step() {
        let (mut s, id) = store_with(3.0, 0.5);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 1,
        })
        .unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id), &[2.5]);
        assert_eq!(s.grad(id), &[0.0]);
    }

    #[test]
    fn momentum_second_displacement_is_1_9x() {
        let (mut s, id) = store_with(0.0, 1.0);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 1,
        })
        .unwrap();
        opt.step(&mut s).unwrap();
        let first = -s.value(id)[0];
        s.grad_mut(id)[0] = 1.0;
        opt.step(&mut s).unwrap();
        let second = -s.value(id)[0] - first;
        assert!((second / first - 1.9).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let (mut s, id) = store_with(2.0, 0.0);
        let lr = 0.1;
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: lr,
            momentum: 0.0,
            weight_decay: 0.0005,
            epochs: 1,
        })
        .unwrap();
        for step in 1..=3 {
            opt.step(&mut s).unwrap();
            let want = 2.0 * (1.0 - lr * 0.0005f64).powi(step);
            assert!((s.value(id)[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let (mut s, id) = store_with(1.0, f64::NAN);
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        let err = opt.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("p"));
        assert_eq!(s.value(id), &[1.0]);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut SgdConfig)| {
            let mut c = SgdConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.learning_rate = 0.0));
        assert!(bad(|c| c.momentum = 1.0));
        assert!(bad(|c| c.weight_decay = -1.0));
        assert!(SgdConfig::default().validate().is_ok());
    }
}
