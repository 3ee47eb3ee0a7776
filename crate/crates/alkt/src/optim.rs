//! Trainable parameters and SGD with momentum plus a single step-decay
//! learning-rate schedule.

use crate::error::{AlktError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of total epochs after which the learning rate is decayed
    /// once, e.g. 0.8 with 100 epochs decays from epoch 80 onward.
    pub decay_epoch_fraction: f64,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epoch_fraction: 0.8,
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(AlktError::invalid("learning-rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AlktError::invalid("momentum must be in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(AlktError::invalid("weight-decay must be >= 0"));
        }
        if !(self.decay_epoch_fraction > 0.0 && self.decay_epoch_fraction <= 1.0) {
            return Err(AlktError::invalid("decay-epoch-fraction must be in (0,1]"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(AlktError::invalid("decay-factor must be in (0,1]"));
        }
        Ok(())
    }

    /// Learning rate at a given (0-based) epoch.
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let boundary = (self.decay_epoch_fraction * total_epochs as f64).floor() as usize;
        if epoch >= boundary {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// A trainable tensor: value, accumulated gradient, momentum velocity.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    velocity: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n = data.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        Param {
            shape,
            data,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// One SGD-with-momentum update over all params:
/// `v <- momentum*v + grad + wd*param; param <- param - lr(epoch)*v`.
/// Grads are zeroed afterward.
pub fn sgd_step(params: &mut [Param], cfg: &SgdConfig, epoch: usize, total_epochs: usize) {
    let lr = cfg.lr_at(epoch, total_epochs);
    for p in params.iter_mut() {
        for i in 0..p.data.len() {
            let v = cfg.momentum * p.velocity[i] + p.grad[i] + cfg.weight_decay * p.data[i];
            p.velocity[i] = v;
            p.data[i] -= lr * v;
            p.grad[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay: 0.0,
            decay_epoch_fraction: 1.0,
            decay_factor: 1.0,
        }
    }

    #[test]
    fn two_hand_computed_steps() {
        let mut params = vec![Param::new(vec![1], vec![1.0])];
        let c = cfg(0.1, 0.9);
        params[0].grad[0] = 0.5;
        sgd_step(&mut params, &c, 0, 10);
        assert_relative_eq!(params[0].velocity[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(params[0].data[0], 0.95, epsilon = 1e-15);
        assert_eq!(params[0].grad[0], 0.0);

        params[0].grad[0] = 0.5;
        sgd_step(&mut params, &c, 1, 10);
        assert_relative_eq!(params[0].velocity[0], 0.95, epsilon = 1e-15);
        assert_relative_eq!(params[0].data[0], 0.855, epsilon = 1e-15);
    }

    #[test]
    fn lr_decays_once_at_fraction_boundary() {
        let c = SgdConfig {
            learning_rate: 0.1,
            decay_epoch_fraction: 0.8,
            decay_factor: 0.1,
            ..cfg(0.1, 0.9)
        };
        for e in 0..80 {
            assert_relative_eq!(c.lr_at(e, 100), 0.1, epsilon = 1e-15);
        }
        for e in 80..100 {
            assert_relative_eq!(c.lr_at(e, 100), 0.01, epsilon = 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let bad = SgdConfig {
            learning_rate: 0.0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut p = Param::new(vec![1], vec![0.0]);
        p.grad[0] += 2.0;
        p.grad[0] += 3.0;
        assert_eq!(p.grad[0], 5.0);
        p.zero_grad();
        assert_eq!(p.grad[0], 0.0);
    }
}
