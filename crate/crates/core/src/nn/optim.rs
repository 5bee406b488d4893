use serde::{Deserialize, Serialize};

use super::{round_f32, Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    grads: &Gradients,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Training(format!(
            "optimizer state holds {} tensors, store holds {}",
            state.m.len(),
            store.len()
        )));
    }
    // validate before mutating anything
    for i in 0..store.len() {
        let (name, p) = store.get_index(i).unwrap();
        if p.trainable && grads.get(i).is_none() {
            return Err(Error::Training(format!(
                "trainable parameter `{name}` received no gradient"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..store.len() {
        let (_, p) = store.get_index_mut(i).unwrap();
        if !p.trainable {
            continue;
        }
        let g = grads.get(i).unwrap().data();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        round_f32(w);
    }
    Ok(())
}

/// `lr0 · (1 + cos(π·step/total)) / 2`, clamped to the schedule's range.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
