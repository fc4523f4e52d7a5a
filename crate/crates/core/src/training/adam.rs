use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grsan::{Gradients, Matrix, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates for every store entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &Matrix {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Matrix {
        &self.v[index]
    }
}

/// Bias-corrected Adam update of every trainable entry.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::dim(format!(
            "optimizer state has {} entries, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let g = grads.get(id);
        if g.shape() != store.value(id).shape() || state.m[id.index()].shape() != g.shape() {
            return Err(Error::dim(format!("gradient shape mismatch for `{}`", store.name(id))));
        }
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let p = store.value_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `lr_start · (lr_end / lr_start)^(epoch / (epochs − 1))`.
pub fn lr_schedule(epoch: usize, epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    if epochs <= 1 || lr_start == 0.0 {
        return lr_start;
    }
    let frac = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lr_start * (lr_end / lr_start).powf(frac)
}
