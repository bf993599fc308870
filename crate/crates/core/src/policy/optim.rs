use alloc::vec;
use alloc::vec::Vec;

use super::params::{check_finite, PolicyParams};
use crate::error::{invalid_input, Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            max_grad_norm: 0.0,
            ..Self::default()
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

/// One first-order update of `params` along `-grad`.
pub fn apply_update(
    params: &mut PolicyParams,
    grad: &[f64],
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    let n = params.param_count();
    if grad.len() != n {
        return Err(invalid_input!("gradient length {} != param count {n}", grad.len()));
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(invalid_input!("optimizer state does not match parameters"));
    }
    check_finite("gradient", grad)?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(invalid_input!("learning rate must be finite and >= 0"));
    }

    let mut scale = 1.0;
    if config.max_grad_norm > 0.0 {
        let norm = math::sqrt(grad.iter().map(|g| g * g).sum());
        if norm > config.max_grad_norm {
            scale = config.max_grad_norm / norm;
        }
    }

    let backup = (params.flat().to_vec(), state.clone());
    state.step += 1;
    let values = params.values_mut();
    match config.kind {
        OptimizerKind::Sgd => {
            for (w, g) in values.iter_mut().zip(grad) {
                *w -= lr * scale * g;
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let bc1 = 1.0 - libm::pow(config.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(config.beta2, t as f64);
            for i in 0..n {
                let g = grad[i] * scale;
                state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
                state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                values[i] -= lr * m_hat / (math::sqrt(v_hat) + config.eps);
            }
        }
    }
    if let Some(index) = values.iter().position(|w| !w.is_finite()) {
        values.copy_from_slice(&backup.0);
        *state = backup.1;
        return Err(Error::NonFinite {
            what: "parameter after update",
            index,
        });
    }
    Ok(())
}
