use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW hyperparameters: {self:?}")))
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// One AdamW step over the parameters named in `trainable` (all of them when
/// `None`). Weight decay is decoupled: `p ← p − lr·wd·p` before the Adam
/// update, and untouched parameters keep their exact values.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimState,
    cfg: &AdamWConfig,
    trainable: Option<&dyn Fn(&str) -> bool>,
) -> Result<()> {
    cfg.validate()?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if let Some(pred) = trainable {
            if !pred(name) {
                continue;
            }
        }
        let g = grads.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::dim("adamw_step", p.shape(), g.shape()));
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= cfg.lr * cfg.weight_decay * pd[i];
            pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
