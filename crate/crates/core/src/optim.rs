//! SGD with momentum, decoupled from the model.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup.min(self.total)).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled to at most this global norm.
    pub clip_norm: f64,
    velocity: ParamSet,
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            clip_norm,
            velocity: ParamSet::new(),
        }
    }

    /// One update; `step` is only used in error messages.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, step: usize) -> Result<()> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), crate::tensor::Tensor::zeros(p.shape()));
            }
            let v = self.velocity.get_mut(name)?;
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = scale * gv + wd * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= lr * *vv;
            }
        }
        if !params.all_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }
        Ok(())
    }
}
