use crate::diffcore::ParamStore;
use crate::error::{Error, Result};

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. Any non-finite gradient aborts before
/// anything is written and names the parameter.
pub fn optimizer_step(store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract("optimizer: gradient or moment count differs from the parameter count"));
    }
    for ((id, p), g) in store.iter().zip(grads) {
        if g.len() != p.value.numel() || state.m[id].len() != g.len() {
            return Err(Error::contract(format!("optimizer: shape mismatch for {}", p.name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(&p.name, "non-finite gradient"));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for id in 0..store.len() {
        if !store.get(id).requires_grad {
            continue;
        }
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        let g = &grads[id];
        let w = store.value_mut(id);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `lr0 (1 + cos(pi step / total)) / 2`, clamped to the schedule's end.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = step.min(total) as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0
}
