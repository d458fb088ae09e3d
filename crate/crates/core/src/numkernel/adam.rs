use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::store::ParamStore;
use crate::error::{Error, Result};

/// Adam moment buffers plus hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, p) in params.iter() {
            m.insert(name.to_string(), Matrix::zeros(p.rows(), p.cols()));
            v.insert(name.to_string(), Matrix::zeros(p.rows(), p.cols()));
        }
        AdamState {
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Scales all gradients by max_norm/g when the global L2 norm g exceeds
/// max_norm. Returns the applied scale.
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in params.grads() {
        for &x in g.data() {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    // the tolerance keeps clipping idempotent: a clipped store lands
    // within rounding of max_norm and must not be rescaled again
    if norm <= max_norm * (1.0 + 1e-12) || norm == 0.0 {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for (_, g) in params.grads_mut() {
        g.scale(scale);
    }
    Ok(scale)
}

/// Bias-corrected Adam update with decoupled weight decay applied as
/// θ ← θ − lr·wd·θ before the Adam delta.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in names {
        let grad = params.grad(&name)?.clone();
        let m = state
            .m
            .get_mut(&name)
            .ok_or_else(|| Error::Lookup(format!("adam moment for {name}")))?;
        let v = state
            .v
            .get_mut(&name)
            .ok_or_else(|| Error::Lookup(format!("adam variance for {name}")))?;
        let p = params.get_mut(&name)?;
        for i in 0..grad.data().len() {
            let g = grad.data()[i];
            if state.weight_decay > 0.0 {
                p.data_mut()[i] -= state.lr * state.weight_decay * p.data()[i];
            }
            m.data_mut()[i] = state.beta1 * m.data()[i] + (1.0 - state.beta1) * g;
            v.data_mut()[i] = state.beta2 * v.data()[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            p.data_mut()[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
