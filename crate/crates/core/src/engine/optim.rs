//! SGD with momentum and L2 weight decay, plus a step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::array::{DenseArray, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_every: 5,
            decay_factor: 0.2,
        }
    }
}

impl SgdConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.decay_every == 0 {
            return self.lr;
        }
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Velocity buffers, created zeroed on the first step.
#[derive(Clone, Debug, Default)]
pub struct SgdState<T> {
    velocity: Vec<DenseArray<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        SgdState {
            velocity: Vec::new(),
        }
    }
}

/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`, elementwise.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut DenseArray<T>],
    grads: &[&DenseArray<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState<T>,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::config("parameter and gradient lists differ in length"));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| DenseArray::zeros(p.shape())).collect();
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::config(format!(
                "parameter shape {:?} does not match gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for ((pv, &gv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut().iter_mut())
        {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DenseArray<f64> {
        DenseArray::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = SgdState::new();
        sgd_step(&mut [&mut p], &[&g], 0.1, 0.0, 0.0, &mut st).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = DenseArray::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = DenseArray::zeros(&[3]);
        let mut st = SgdState::new();
        for _ in 0..5 {
            sgd_step(&mut [&mut p], &[&g], 0.1, 0.0, 0.0, &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = SgdState::new();
        sgd_step(&mut [&mut p], &[&g], 0.1, 0.9, 0.0, &mut st).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-12);
        sgd_step(&mut [&mut p], &[&g], 0.1, 0.9, 0.0, &mut st).unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = SgdState::new();
        assert!(sgd_step(&mut [&mut p], &[&g], 0.0, 0.9, 0.0, &mut st).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = SgdConfig {
            lr: 0.1,
            decay_every: 2,
            decay_factor: 0.5,
            ..SgdConfig::default()
        };
        assert_eq!(cfg.lr_at_epoch(0), 0.1);
        assert_eq!(cfg.lr_at_epoch(1), 0.1);
        assert_eq!(cfg.lr_at_epoch(2), 0.05);
        assert_eq!(cfg.lr_at_epoch(5), 0.025);
    }
}
