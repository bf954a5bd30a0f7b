use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
        }
    }
}

/// Mini-batch SGD with heavy-ball (or Nesterov) momentum and L2 weight decay.
///
/// ```text
/// g' = g + wd * theta
/// v  = m * v + g'
/// theta -= lr * v                 (plain)
/// theta -= lr * (g' + m * v)      (nesterov)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: false,
        }
    }
}

impl Sgd {
    /// Applies one update and zeroes the gradients. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if let Some(index) = p.grad.data().iter().position(|g| !g.is_finite()) {
                log::error!("rejecting SGD step: {} has non-finite gradient at {index}", p.name);
                return Err(Error::NonFiniteGradient {
                    param: p.name.clone(),
                    index,
                });
            }
        }
        for p in params.iter_mut() {
            let Parameter {
                value,
                grad,
                velocity,
                ..
            } = &mut **p;
            for ((theta, g), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(velocity.data_mut())
            {
                let g = g + self.weight_decay * *theta;
                *v = self.momentum * *v + g;
                if self.nesterov {
                    *theta -= self.lr * (g + self.momentum * *v);
                } else {
                    *theta -= self.lr * *v;
                }
            }
            grad.fill(0.0);
        }
        Ok(())
    }
}
