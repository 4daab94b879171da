use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.98, epsilon: 1e-9 }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam optimizer state over a fixed, ordered set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub t: u64,
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new<'a>(hyper: AdamHyper, learning_rate: f64, params: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let slots = params
            .into_iter()
            .map(|(name, len)| AdamSlot { name: name.to_owned(), m: vec![0.0; len], v: vec![0.0; len] })
            .collect();
        AdamState {
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            epsilon: hyper.epsilon,
            learning_rate,
            t: 0,
            slots,
        }
    }
}

/// One bias-corrected Adam update. `params[i]` pairs a diagnostic label (the
/// parameter group and name) with the tensor matching `state.slots[i]`; a
/// tensor without a gradient is treated as having a zero gradient.
///
/// Gradients are validated before anything is modified, so a non-finite
/// gradient leaves both parameters and state untouched.
pub fn adam_step(params: &mut [(&str, &mut Tensor)], state: &mut AdamState) -> Result<()> {
    if params.len() != state.slots.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters for {} optimizer slots", params.len(), state.slots.len()),
        ));
    }
    for ((label, p), slot) in params.iter().zip(&state.slots) {
        if p.numel() != slot.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{label}: parameter has {} values, moments have {}", p.numel(), slot.m.len()),
            ));
        }
        if let Some(i) = p.grad().and_then(|g| g.iter().position(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {label} at element {i}")));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for ((_, p), slot) in params.iter_mut().zip(&mut state.slots) {
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
            // Zero gradient: decay the moments, and the step below is zero.
            slot.m.iter_mut().for_each(|m| *m *= b1);
            slot.v.iter_mut().for_each(|v| *v *= b2);
            apply(p.data_mut(), &slot.m, &slot.v, bc1, bc2, eps, lr);
            continue;
        };
        for ((m, v), g) in slot.m.iter_mut().zip(slot.v.iter_mut()).zip(&grad) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        apply(p.data_mut(), &slot.m, &slot.v, bc1, bc2, eps, lr);
    }
    Ok(())
}

fn apply(data: &mut [f64], m: &[f64], v: &[f64], bc1: f64, bc2: f64, eps: f64, lr: f64) {
    for ((x, m), v) in data.iter_mut().zip(m).zip(v) {
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        *x -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
