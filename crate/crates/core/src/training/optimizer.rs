use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, ParamStore};

/// AdamW moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay. Parameters
/// without a gradient are left untouched.
pub fn optimizer_step(params: &mut ParamStore, grads: &Grads, state: &mut OptimizerState, lr: f64) -> Result<()> {
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = params.get_mut(id).data_mut();
        for k in 0..theta.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            theta[k] -= lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * theta[k]);
        }
    }
    Ok(())
}
