//! AdaBelief with global-norm clipping and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaBelief {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdaBelief {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-16, weight_decay: 1e-8, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: Vec<Mat>,
    pub belief: Vec<Mat>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, v)| Mat::zeros(v.rows, v.cols)).collect();
        Self { momentum: zeros.clone(), belief: zeros, steps: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub skipped: bool,
}

impl AdaBelief {
    /// One update. Gradients are clipped to `clip_norm` first; a step with
    /// non-finite gradients leaves parameters and state untouched.
    pub fn step(&self, params: &mut ParamStore, state: &mut OptimizerState, grads: &Gradients, lr: f64) -> StepReport {
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() || !grads.all_finite() {
            return StepReport { grad_norm, clip_scale: 0.0, skipped: true };
        }
        let clip_scale =
            if self.clip_norm > 0.0 && grad_norm > self.clip_norm { self.clip_norm / grad_norm } else { 1.0 };
        state.steps += 1;
        let t = state.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id);
            let (m, s) = (&mut state.momentum[k], &mut state.belief[k]);
            let p = params.value_mut(id);
            for e in 0..p.data.len() {
                let gi = g.map_or(0.0, |g| g.data[e] * clip_scale);
                let mi = self.beta1 * m.data[e] + (1.0 - self.beta1) * gi;
                let diff = gi - mi;
                let si = self.beta2 * s.data[e] + (1.0 - self.beta2) * diff * diff + self.eps;
                m.data[e] = mi;
                s.data[e] = si;
                let update = (mi / bc1) / ((si / bc2).sqrt() + self.eps);
                p.data[e] -= lr * (update + self.weight_decay * p.data[e]);
            }
        }
        StepReport { grad_norm, clip_scale, skipped: false }
    }
}
