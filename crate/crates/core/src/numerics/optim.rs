use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having a zero gradient.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get(id);
        let g = grads.get(id);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    name: params.name(id).to_string(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        if m.len() != p.numel() {
            return Err(Error::Dimension(format!("moment size mismatch for `{}`", params.name(id))));
        }
        let mut data = p.data().to_vec();
        for i in 0..data.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        let updated = Tensor::new(p.shape().to_vec(), data, p.precision())?;
        params.set(id, updated)?;
    }
    Ok(())
}
