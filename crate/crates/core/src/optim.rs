//! SGD with momentum and a step learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::GradTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub seed: u64,
    pub batch_size: usize,
    /// Rescale each mini-batch gradient to at most this global L2 norm before
    /// the momentum update. `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 0.01,
            momentum: 0.9,
            decay_factor: 10.0,
            decay_epochs: vec![60, 80, 90],
            seed: 0,
            batch_size: 32,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr0 must be nonnegative, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return Err(Error::InvalidConfig(format!("decay_factor must be positive, got {}", self.decay_factor)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("decay_epochs must be strictly increasing".into()));
        }
        if let Some(&last) = self.decay_epochs.last() {
            if last >= self.epochs {
                return Err(Error::InvalidConfig(format!(
                    "decay epoch {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Copy with `epochs` replaced and decay milestones at or past the new count dropped.
    pub fn with_epochs(&self, epochs: usize) -> Self {
        let mut cfg = self.clone();
        cfg.epochs = epochs;
        cfg.decay_epochs.retain(|&e| e < epochs);
        cfg
    }

    /// Copy with `epochs` replaced and every milestone moved to the same fraction
    /// of the new run (60/80/90 of 100 becomes 18/24/27 of 30).
    pub fn with_scaled_schedule(&self, epochs: usize) -> Self {
        let mut cfg = self.clone();
        let old = self.epochs.max(1);
        cfg.epochs = epochs;
        cfg.decay_epochs =
            self.decay_epochs.iter().map(|&e| e * epochs / old).filter(|&e| e > 0 && e < epochs).collect();
        cfg.decay_epochs.dedup();
        cfg
    }

    /// `lr0 / decay_factor^(number of milestones already reached)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr0 / libm::pow(self.decay_factor, passed as f64)
    }
}

/// One momentum step on a flat parameter slice: `v = m·v + g; p -= lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], momentum: f64, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch { axis: "gradient", expected: params.len(), found: grads.len() });
    }
    if velocity.len() != params.len() {
        return Err(Error::ShapeMismatch { axis: "velocity", expected: params.len(), found: velocity.len() });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for a fixed list of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[&GradTensor]) -> Self {
        Self { velocity: params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    /// Applies one update using each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut GradTensor], config: &TrainConfig, epoch: usize) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch {
                axis: "parameter list",
                expected: self.velocity.len(),
                found: params.len(),
            });
        }
        let lr = config.learning_rate(epoch);
        let scale = match config.grad_clip {
            Some(max) => {
                let norm = libm::sqrt(params.iter().flat_map(|p| p.grad().unwrap_or(&[])).map(|g| g * g).sum());
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let mut grad = p.grad_mut().to_vec();
            if scale != 1.0 {
                grad.iter_mut().for_each(|g| *g *= scale);
            }
            sgd_step(p.values_mut(), &grad, v, config.momentum, lr)?;
        }
        Ok(())
    }
}
