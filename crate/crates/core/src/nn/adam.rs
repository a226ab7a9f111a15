//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::network::NetworkParams;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(NnError::InvalidConfig("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(NnError::InvalidConfig("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(NnError::InvalidConfig("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One optimizer step. Invalidates forward caches taken before the call.
pub fn adam_update(params: &mut NetworkParams, grad: &NetworkParams, state: &mut AdamState, config: &AdamConfig) -> Result<(), NnError> {
    params.check_same_shape(grad)?;
    params.check_same_shape(&state.m)?;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(config.beta1, t);
    let c2 = 1.0 - libm::pow(config.beta2, t);
    let p_all = params.tensors_mut();
    let g_all = grad.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for (((p, g), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (libm::sqrt(v_hat) + config.epsilon);
        }
    }
    params.bump_version();
    Ok(())
}
