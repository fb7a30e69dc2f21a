//! Adam with exponential learning-rate decay over the training run.

use crate::error::{Error, Result};
use crate::real::{c, Real};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr0: f64,
    /// lr(t) = lr0 · decay_rate^(t / decay_steps)
    pub decay_rate: f64,
    pub decay_steps: u64,
}

impl AdamHyper {
    pub fn new(lr0: f64, decay_rate: f64, decay_steps: u64) -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, lr0, decay_rate, decay_steps }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper::new(5e-4, 0.1, 100_000)
    }
}

/// Continuous per-step exponential decay.
pub fn lr_at(h: &AdamHyper, t: u64) -> f64 {
    h.lr0 * h.decay_rate.powf(t as f64 / h.decay_steps.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub hyper: AdamHyper,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
    /// Optional global-norm gradient clip (off by default).
    pub clip_global_norm: Option<f64>,
}

impl<F: Real> AdamState<F> {
    pub fn new(n_params: usize, hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
            clip_global_norm: None,
        }
    }

    /// One bias-corrected update; returns the learning rate applied.
    /// Rejects non-finite gradients with the offending parameter index.
    pub fn step(&mut self, params: &mut [F], grads: &[F]) -> Result<f64> {
        assert_eq!(params.len(), self.m.len(), "parameter/state length mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient/state length mismatch");
        if let Some(index) = grads.iter().position(|g| !g.as_f64().is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        let clip_scale = match self.clip_global_norm {
            Some(max_norm) => {
                let norm =
                    grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let lr = lr_at(&self.hyper, self.t);
        let t1 = (self.t + 1) as i32;
        let b1 = c::<F>(self.hyper.beta1);
        let b2 = c::<F>(self.hyper.beta2);
        let one = F::one();
        let bc1 = one - b1.powi(t1);
        let bc2 = one - b2.powi(t1);
        let eps = c::<F>(self.hyper.eps);
        let lr_f = c::<F>(lr);
        let cs = c::<F>(clip_scale);

        for i in 0..params.len() {
            let g = grads[i] * cs;
            let m = b1 * self.m[i] + (one - b1) * g;
            let v = b2 * self.v[i] + (one - b2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] = params[i] - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
        self.t += 1;
        Ok(lr)
    }
}
