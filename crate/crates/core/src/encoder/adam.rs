use serde::{Deserialize, Serialize};

use super::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelWeights<T>,
    pub v: ModelWeights<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        AdamState {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of a single tensor at step `t` (1-based).
pub fn adam_update<T: Real>(
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    lr: f64,
    p: &AdamParams,
) {
    let (b1, b2) = (T::of(p.beta1), T::of(p.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - p.beta1), T::of(1.0 - p.beta2));
    let bc1 = T::of(1.0 - p.beta1.powi(t as i32));
    let bc2 = T::of(1.0 - p.beta2.powi(t as i32));
    let (lr, eps) = (T::of(lr), T::of(p.eps));
    for (((w, &g), m), v) in w.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every tensor. Fails without touching anything
/// if any gradient entry is non-finite.
pub fn adam_step<T: Real>(
    weights: &mut ModelWeights<T>,
    grads: &ModelWeights<T>,
    state: &mut AdamState<T>,
    lr: f64,
    params: &AdamParams,
) -> Result<()> {
    let named = grads.named_tensors();
    if let Some((name, _)) = named.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::GradientOverflow(name.clone()));
    }
    let n_w = weights.named_tensors().len();
    if named.len() != n_w || state.m.named_tensors().len() != n_w {
        return Err(Error::Shape(
            "gradient or optimizer state does not match the weights".into(),
        ));
    }
    state.t += 1;
    let t = state.t;
    for (((w, (_, g)), m), v) in weights
        .tensors_mut()
        .into_iter()
        .zip(named)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        if w.shape != g.shape || m.shape != w.shape {
            return Err(Error::Shape("gradient shape does not match weight".into()));
        }
        adam_update(w, g, m, v, t, lr, params);
    }
    Ok(())
}
