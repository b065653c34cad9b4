//! Optimizers, learning-rate schedules and the weight EMA.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lion,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Learning rate at `step` of `total` (cosine decays to zero at `total`).
pub fn learning_rate(schedule: LrSchedule, base: f64, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let frac = if total == 0 {
                0.0
            } else {
                (step as f64 / total as f64).min(1.0)
            };
            0.5 * base * (1.0 + (PI * frac).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn lion() -> Self {
        Self {
            kind: OptimizerKind::Lion,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            eps: 0.0,
        }
    }

    pub fn adamw() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

/// Moment buffers; `v` is only used by AdamW.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    /// Updates applied so far (AdamW bias correction).
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One update of every parameter that received a gradient.
pub fn apply_update(
    cfg: &OptimizerConfig,
    lr: f64,
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState,
    grads: &HashMap<usize, Tensor<f32>>,
) {
    state.t += 1;
    let (b1, b2, wd) = (cfg.beta1, cfg.beta2, cfg.weight_decay);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let mut ids: Vec<usize> = grads.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        let g = grads[&id].data();
        let p = params.get_mut(id).data_mut();
        let m = state.m.get_mut(id).data_mut();
        match cfg.kind {
            OptimizerKind::Lion => {
                for ((p, m), &g) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                    let (pv, mv, gv) = (*p as f64, *m as f64, g as f64);
                    let c = b1 * mv + (1.0 - b1) * gv;
                    let s = if c > 0.0 {
                        1.0
                    } else if c < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *p = (pv - lr * (s + wd * pv)) as f32;
                    *m = (b2 * mv + (1.0 - b2) * gv) as f32;
                }
            }
            OptimizerKind::Adamw => {
                let v = state.v.get_mut(id).data_mut();
                for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                    let gv = g as f64;
                    let mv = b1 * *m as f64 + (1.0 - b1) * gv;
                    let vv = b2 * *v as f64 + (1.0 - b2) * gv * gv;
                    let pv = *p as f64;
                    let step = (mv / bc1) / ((vv / bc2).sqrt() + cfg.eps);
                    *p = (pv - lr * (step + wd * pv)) as f32;
                    *m = mv as f32;
                    *v = vv as f32;
                }
            }
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) {
    for id in 0..params.len() {
        let p = params.get(id).data();
        for (e, &v) in ema.get_mut(id).data_mut().iter_mut().zip(p) {
            *e = (decay * *e as f64 + (1.0 - decay) * v as f64) as f32;
        }
    }
}

/// `||params - ema|| / ||params||`.
pub fn ema_gap(ema: &ParamStore<f32>, params: &ParamStore<f32>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in params.tensors().iter().zip(ema.tensors()) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            num += (x as f64 - y as f64).powi(2);
            den += (x as f64).powi(2);
        }
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
