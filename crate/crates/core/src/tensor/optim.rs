//! Adaptive-moment optimizer and plateau learning-rate scheduler.

use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

/// Adam with bias correction. Hyperparameters are fixed (beta1 0.9,
/// beta2 0.999, eps 1e-8) so runs are reproducible; only the learning rate
/// varies, via the scheduler.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0);
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the step counter. Call once per batch, before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one bias-corrected update to a single named parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGrad { param: name.to_string() });
        }
        if grad.len() != param.numel() {
            return Err(TensorError::Shape {
                op: "adam",
                detail: format!(
                    "gradient length {} does not match parameter `{name}` ({})",
                    grad.len(),
                    param.numel()
                ),
            });
        }
        debug_assert!(self.step >= 1, "begin_step must run before update");
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let data = param.data_mut();
        for i in 0..grad.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Reduce-on-plateau: divide the learning rate by `factor` after `patience`
/// consecutive epochs without strict improvement of the validation loss.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: u32,
    best: f64,
    stale: u32,
}

impl PlateauScheduler {
    /// Defaults: factor 10, patience 2 epochs.
    pub fn new(lr0: f64) -> Self {
        PlateauScheduler { lr: lr0, factor: 10.0, patience: 2, best: f64::INFINITY, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's validation loss; returns the (possibly reduced)
    /// learning rate. Improvement means strictly lower than the best seen.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr /= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}
