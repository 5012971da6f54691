//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapt::NcadaptModel;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    /// Number of updates taken so far.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One bias-corrected Adam update of a flat slice at step `t ≥ 1`.
pub fn adam_update(theta: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        theta[i] = (theta[i] as f64 - step) as f32;
    }
}

impl AdamState {
    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen parameters are skipped even when a gradient is supplied.
    pub fn step(
        &mut self,
        model: &mut NcadaptModel,
        grads: &BTreeMap<usize, Tensor<f32>>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (&i, g) in grads {
            if !g.is_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    reason: format!("non-finite gradient for '{}'", model.params()[i].name),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        for (&i, g) in grads {
            let p = &model.params()[i];
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("gradient {:?} for '{}' {:?}", g.shape(), p.name, p.value.shape())));
            }
            let mom = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: g.zeros_like(),
                v: g.zeros_like(),
            });
            let theta = model.value_mut(i);
            adam_update(theta.data_mut(), g.data(), mom.m.data_mut(), mom.v.data_mut(), t, lr, cfg);
        }
        Ok(())
    }
}
