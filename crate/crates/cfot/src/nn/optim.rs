//! AdamW with decoupled weight decay, and a parameter EMA.

use super::Params;
use crate::error::{Error, Result};

/// Optimizer state: first/second moment accumulators plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    /// Defaults: lr 1e-4, weight decay 1e-4, β1 0.9, β2 0.999, ε 1e-8.
    pub fn new(n_params: usize) -> Self {
        Self::with_hyper(n_params, 1e-4, 1e-4)
    }

    pub fn with_hyper(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One decoupled-weight-decay update with bias correction. A non-finite
    /// gradient rejects the step without touching any state.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                expected: format!("{} params", self.m.len()),
                got: format!("{}/{}", params.len(), grads.len()),
            });
        }
        if let Some(pos) = grads.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "adamw_step",
                detail: format!("gradient index {pos}"),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((theta, &g), m), v) in params
            .data
            .iter_mut()
            .zip(&grads.data)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *theta *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone)]
pub struct EmaParams {
    pub decay: f64,
    pub shadow: Params,
}

impl EmaParams {
    /// Default decay 0.9999.
    pub fn new(params: &Params) -> Self {
        Self::with_decay(params, 0.9999)
    }

    pub fn with_decay(params: &Params, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
    pub fn update(&mut self, params: &Params) {
        for (s, &p) in self.shadow.data.iter_mut().zip(&params.data) {
            *s = self.decay * *s + (1.0 - self.decay) * p;
        }
    }
}
