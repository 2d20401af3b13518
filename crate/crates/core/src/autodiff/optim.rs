use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.98, weight_decay: 1e-6 }
    }
}

/// Classical momentum SGD with L2 weight decay:
/// `v ← μ v + (g + λ w)`, `w ← w − η v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update and clears gradients. Parameters without a
    /// gradient only see weight decay. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = &p.tensor.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
            }
        }
        for (name, p) in params.iter_mut() {
            let grad = p.tensor.grad.take();
            let n = p.tensor.len();
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let w = p.tensor.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + weight_decay * w[i];
                v[i] = momentum * v[i] + g;
                w[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

impl Sgd {
    pub fn quantize_f32(&mut self) {
        self.velocity.values_mut().flatten().for_each(|v| *v = *v as f32 as f64);
    }
}

pub fn sgd_step(params: &mut ParamStore, state: &mut Sgd, cfg: &SgdConfig) -> Result<()> {
    state.step(params, cfg.lr, cfg.momentum, cfg.weight_decay)
}
