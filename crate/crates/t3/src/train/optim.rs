//! Adaptive-moment optimizer with decoupled weight decay, and the
//! warmup-plus-cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Update count for this parameter (bias correction); decoders update
    /// only when their pairing is drawn, so counts differ across params.
    pub t: u64,
}

/// Optimizer state keyed by parameter name, so it survives checkpointing
/// and partial (routed) updates.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamW {
    pub states: BTreeMap<String, ParamState>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one update to the given parameters from their accumulated
    /// gradients. Parameters without a gradient receive only decay. Decay is
    /// multiplicative and skipped for rank-1 tensors (biases, norm affines,
    /// CLS and mask tokens).
    pub fn step(&mut self, params: &[(String, Tensor<f32>)], lr: f64, weight_decay: f64) {
        for (name, p) in params {
            let rank = p.shape().len();
            let decay = if rank == 1 { 0.0 } else { weight_decay };
            if decay != 0.0 && lr != 0.0 {
                let factor = (1.0 - lr * decay) as f32;
                p.apply_update(|d| {
                    for v in d.iter_mut() {
                        *v *= factor;
                    }
                });
            }
            let Some(g) = p.grad() else { continue };
            let n = p.numel();
            assert_eq!(
                g.len(),
                n,
                "gradient length {} does not match parameter '{name}' of {n} values",
                g.len()
            );
            let state = self.states.entry(name.clone()).or_default();
            if state.m.is_empty() {
                state.m = vec![0.0; n];
                state.v = vec![0.0; n];
            }
            assert_eq!(
                state.m.len(),
                n,
                "optimizer state for '{name}' has stale shape"
            );
            state.t += 1;
            let bc1 = 1.0 - BETA1.powi(state.t as i32);
            let bc2 = 1.0 - BETA2.powi(state.t as i32);
            p.apply_update(|d| {
                for i in 0..n {
                    let gi = g[i] as f64;
                    let m = BETA1 * state.m[i] as f64 + (1.0 - BETA1) * gi;
                    let v = BETA2 * state.v[i] as f64 + (1.0 - BETA2) * gi * gi;
                    state.m[i] = m as f32;
                    state.v[i] = v as f32;
                    let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                    d[i] -= update as f32;
                }
            });
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `cfg.steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1);
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
