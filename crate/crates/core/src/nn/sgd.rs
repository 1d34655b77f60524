//! SGD with momentum and weight decay, and the inverse learning-rate decay
//! `lr = lr_init * (1 + gamma * iter)^(-power)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub power: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr_init: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            gamma: 0.0001,
            power: 0.75,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_init > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.gamma >= 0.0
            && self.power >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SGD settings {self:?}")))
        }
    }
}

pub fn lr_at(iter: usize, cfg: &SgdConfig) -> f64 {
    cfg.lr_init * (1.0 + cfg.gamma * iter as f64).powf(-cfg.power)
}

/// One momentum step on a single tensor:
/// `v = momentum * v + lr * (g + decay * w); w = w - v`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, cfg: &SgdConfig) -> Result<()> {
    grad.expect_shape(param.shape())?;
    velocity.expect_shape(param.shape())?;
    let w = param.data_mut();
    for ((w, &g), v) in w.iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = cfg.momentum * *v + lr * (g + cfg.weight_decay * *w);
        *w -= *v;
    }
    Ok(())
}

/// Optimizer holding one zero-initialized momentum buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, param_shapes: &[Vec<usize>]) -> Self {
        Sgd {
            config,
            velocity: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], iter: usize) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.velocity.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        let lr = lr_at(iter, &self.config);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            sgd_step(p, g, v, lr, &self.config)?;
        }
        Ok(())
    }
}
