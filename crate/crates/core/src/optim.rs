//! SGD with momentum and weight decay, plus global L2 gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::nn::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_max_norm: f64,
    pub batch_size: usize,
    /// Drop backbone velocity when an unfrozen epoch follows a frozen one.
    pub reset_momentum_on_unfreeze: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_max_norm: 35.0,
            batch_size: 8,
            reset_momentum_on_unfreeze: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("sgd.momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("sgd.weight_decay must be >= 0".into()));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::Config("sgd.clip_max_norm must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("sgd.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, created on a parameter's first update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }

    pub fn reset(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            self.velocity.remove(&id);
        }
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.values().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient by `max_norm / n` when the global L2 norm `n`
/// exceeds `max_norm`.
pub fn clip_gradients(grads: Gradients, max_norm: f64) -> Gradients {
    let norm = global_norm(&grads);
    if norm <= max_norm {
        return grads;
    }
    let scale = max_norm / norm;
    grads
        .iter()
        .map(|(id, g)| {
            let values = g.values().iter().map(|v| v * scale).collect();
            (
                id,
                Tensor::new(g.shape().to_vec(), values).expect("same shape"),
            )
        })
        .collect()
}

/// One momentum step for every parameter present in `grads`:
/// `g += wd * p; v = momentum * v + g; p -= lr * v`.
/// Parameters without a gradient are not touched, nor is their velocity.
pub fn sgd_step(
    params: &mut [Parameter],
    grads: &Gradients,
    state: &mut OptimState,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    for (id, g) in grads.iter() {
        let p = params
            .iter()
            .find(|p| p.id == id)
            .ok_or(Error::UnknownParam(id.0))?;
        if p.shape != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: p.shape.clone(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    for p in params.iter_mut() {
        let Some(g) = grads.get(p.id) else {
            continue;
        };
        let v = state
            .velocity
            .entry(p.id)
            .or_insert_with(|| vec![0.0; p.values.len()]);
        for ((w, &gi), vi) in p.values.iter_mut().zip(g.values()).zip(v.iter_mut()) {
            let d = gi + cfg.weight_decay * *w;
            *vi = cfg.momentum * *vi + d;
            *w -= lr * *vi;
        }
    }
    Ok(())
}
