use crate::error::{Error, Result};

/// Adam moment buffers for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            step: 0,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    let n = state.first.len();
    for len in [params.len(), grads.len(), state.second.len()] {
        if len != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: len,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        let m = state.beta1 * state.first[i] + (1.0 - state.beta1) * g;
        let v = state.beta2 * state.second[i] + (1.0 - state.beta2) * g * g;
        state.first[i] = m;
        state.second[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + state.eps);
    }
    Ok(())
}
