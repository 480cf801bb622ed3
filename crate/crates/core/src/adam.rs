//! Adam with bias correction over a flat parameter vector.

use log::warn;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    #[serde(with = "crate::bits::f32_bits")]
    pub lr: f32,
    #[serde(with = "crate::bits::f32_bits")]
    pub beta1: f32,
    #[serde(with = "crate::bits::f32_bits")]
    pub beta2: f32,
    #[serde(with = "crate::bits::f32_bits")]
    pub eps: f32,
    #[serde(with = "crate::bits::vec_f32")]
    m: Vec<f32>,
    #[serde(with = "crate::bits::vec_f32")]
    v: Vec<f32>,
    /// Applied steps; drives bias correction.
    pub t: u64,
    /// Steps skipped because a gradient was not finite.
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

impl Adam {
    pub fn new(len: usize, lr: f32, betas: (f32, f32), eps: f32) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Updates `params` in place. A gradient with any non-finite entry
    /// leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> StepOutcome {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            warn!("skipping optimizer step: non-finite gradient ({} skipped so far)", self.skipped);
            return StepOutcome::Skipped;
        }
        self.t += 1;
        let (b1, b2) = (self.beta1 as f64, self.beta2 as f64);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr as f64, self.eps as f64);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
            params[i] = (params[i] as f64 - update) as f32;
        }
        StepOutcome::Applied
    }
}
