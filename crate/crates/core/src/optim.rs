//! Adam (and plain SGD for debugging) with per-group learning rates and
//! global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.0,
            clip: Some(1.0),
        }
    }
}

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub generation: f64,
    pub understanding: f64,
}

impl GroupLrs {
    pub fn uniform(lr: f64) -> Self {
        Self {
            generation: lr,
            understanding: lr,
        }
    }

    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Generation => self.generation,
            ParamGroup::Understanding => self.understanding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Update count per parameter (parameters without a gradient skip a step).
    t: Vec<u64>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: vec![0; store.len()],
        }
    }

    /// Clips the global gradient norm, then updates every parameter that
    /// holds a gradient. Fails before touching anything if a gradient is
    /// not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lrs: &GroupLrs) -> Result<StepStats> {
        for (_, p) in store.iter() {
            if let Some(g) = p.tensor.grad() {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} at element {i} is {}", p.name, g[i])));
                }
            }
        }
        let norm = store.grad_norm();
        let factor = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let cfg = self.config;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let lr = T::lit(lrs.get(store.param(id).group));
            let tensor = store.tensor_mut(id);
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let f = T::lit(factor);
            let grad: Vec<T> = if factor == 1.0 { grad } else { grad.iter().map(|&x| x * f).collect() };
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    self.t[i] += 1;
                    let t = self.t[i] as i32;
                    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
                    let bc1 = T::one() - b1.powi(t);
                    let bc2 = T::one() - b2.powi(t);
                    let eps = T::lit(cfg.eps);
                    let wd = T::lit(cfg.weight_decay);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        m[j] = b1 * m[j] + (T::one() - b1) * g;
                        v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        if cfg.weight_decay != 0.0 {
                            *p -= lr * wd * *p;
                        }
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped_norm: norm * factor,
        })
    }
}
