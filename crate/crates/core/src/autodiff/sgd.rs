//! Plain stochastic gradient descent with per-epoch learning-rate decay.
//! No momentum, no clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParamSet;
use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SGDConfig {
    /// Initial learning rate.
    pub lr: f64,
    /// Multiplicative decay applied once per epoch.
    pub decay: f64,
    /// Classical momentum coefficient; 0 is plain SGD.
    #[serde(default)]
    pub momentum: f64,
}

impl Default for SGDConfig {
    fn default() -> Self {
        Self { lr: 1.0, decay: 0.9, momentum: 0.0 }
    }
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!("decay {} must be in (0, 1]", self.decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Learning rate at a given epoch: lr₀ · decay^epoch.
pub fn decay_lr(cfg: &SGDConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.decay.powi(epoch as i32)
}

/// p ← p − lr·grad for every parameter; gradients are zeroed afterwards.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, lr: f64) {
    let step = T::of_f64(-lr);
    for i in 0..params.len() {
        let id = super::params::ParamId(i);
        let grad = params.grad(id).clone();
        params.value_mut(id).scaled_add_assign(&grad, step);
    }
    params.zero_grads();
}

/// Momentum step: v ← μ·v + grad, p ← p − lr·v. With μ = 0 this is the
/// plain step. `velocity` must match the parameter set layout.
pub fn sgd_step_momentum<T: Scalar>(
    params: &mut ParamSet<T>,
    velocity: &mut [crate::autodiff::Tensor<T>],
    momentum: f64,
    lr: f64,
) {
    debug_assert_eq!(velocity.len(), params.len());
    let mu = T::of_f64(momentum);
    let step = T::of_f64(-lr);
    for i in 0..params.len() {
        let id = super::params::ParamId(i);
        let grad = params.grad(id).clone();
        let v = &mut velocity[i];
        for (vv, gg) in v.data_mut().iter_mut().zip(grad.data().iter()) {
            *vv = mu * *vv + *gg;
        }
        params.value_mut(id).scaled_add_assign(v, step);
    }
    params.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn step_moves_against_gradient() {
        // p = 1, grad = 0.5, lr = 1.0 → p = 0.5.
        let mut set = ParamSet::<f32>::new();
        let p = set.add("p", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        let mut g = crate::autodiff::Graph::<f32>::new();
        let binding = set.bind(&mut g, true);
        let s = g.sum(binding.var(p)); // d/dp = 1
        g.backward(s).unwrap();
        let export = set.export_grads(&g, &binding);
        set.accumulate(&export, 0.5);
        sgd_step(&mut set, 1.0);
        assert!((set.value(p).data()[0] - 0.5).abs() < 1e-6);
        assert_eq!(set.grad(p).data(), &[0.0]);
    }

    #[test]
    fn decay_schedule() {
        let cfg = SGDConfig { lr: 1.0, decay: 0.9, momentum: 0.0 };
        assert_eq!(decay_lr(&cfg, 0), 1.0);
        assert!((decay_lr(&cfg, 1) - 0.9).abs() < 1e-12);
        assert!((decay_lr(&cfg, 10) - 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SGDConfig { lr: 0.0, decay: 0.9, momentum: 0.0 }.validate().is_err());
        assert!(SGDConfig { lr: 1.0, decay: 0.0, momentum: 0.0 }.validate().is_err());
        assert!(SGDConfig { lr: 1.0, decay: 1.5, momentum: 0.0 }.validate().is_err());
        assert!(SGDConfig { lr: 1.0, decay: 0.9, momentum: 1.0 }.validate().is_err());
        assert!(SGDConfig::default().validate().is_ok());
    }
}
