use serde::{Deserialize, Serialize};

use crate::error::{OclipError, Result};
use crate::model::{decays, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr_init: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments (parallel to the parameter list) and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            hyper,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with bias correction. Weight decay is decoupled
/// (`θ ← θ·(1 − lr·wd)`) and skipped for gains, biases and the temperature.
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(OclipError::Contract(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(OclipError::ShapeMismatch {
                name: name.to_string(),
                stored: g.shape().to_vec(),
                expected: p.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(OclipError::Divergence(format!("gradient of {name}")));
        }
    }

    let h = state.hyper.clone();
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let names: Vec<String> = params.names().to_vec();
    for (i, theta) in params.tensors_mut().iter_mut().enumerate() {
        let decay = if decays(&names[i]) {
            1.0 - lr * h.weight_decay
        } else {
            1.0
        };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = h.beta1 * *mj + (1.0 - h.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = h.beta2 * *vj + (1.0 - h.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, w) in theta.data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    params.clamp_temperature();
    Ok(())
}
