//! Wasserstein critic loss with gradient penalty, the policy loss, and the
//! per-step loss report.

use crate::critic::Critic;
use augsearch_autodiff::{AutodiffError, Result, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Added under the square root of the gradient norm so that its derivative
/// stays finite at zero.
pub const NORM_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    /// `mean D(real) - mean D(augmented)` under the current critic.
    pub wasserstein_estimate: f64,
    pub gradient_penalty: f64,
    pub cls_loss: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.wasserstein_estimate,
            self.gradient_penalty,
            self.cls_loss,
            self.policy_loss,
            self.critic_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-sample interpolation weights for the penalty points.
pub fn penalty_mix(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen::<f32>()).collect()
}

/// `x̂_i = t_i·real_i + (1 - t_i)·fake_i`.
pub fn interpolate(real: &Tensor, fake: &Tensor, mix: &[f32]) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "interpolate",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    let n = real.shape()[0];
    if mix.len() != n {
        return Err(AutodiffError::Invalid(format!("need {n} mix weights, got {}", mix.len())));
    }
    let per = real.numel() / n.max(1);
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (&r, &f))| {
            let t = mix[i / per];
            t * r + (1.0 - t) * f
        })
        .collect();
    Tensor::new(real.shape().to_vec(), data)
}

/// `mean_i (‖∇_x D(x̂_i)‖₂ - 1)²` over interpolated points.
pub fn gradient_penalty<'t, C: Critic<'t>>(
    critic: &C,
    tape: &'t Tape,
    real: &Tensor,
    fake: &Tensor,
    mix: &[f32],
) -> Result<Var<'t>> {
    let x_hat = tape.constant(interpolate(real, fake, mix)?);
    let g = critic.input_gradient(x_hat)?;
    let norm = g
        .square()
        .sum_axes(&[1, 2, 3], false)?
        .add_scalar(NORM_EPS)
        .sqrt();
    Ok(norm.add_scalar(-1.0).square().mean())
}

pub struct CriticLoss<'t> {
    pub loss: Var<'t>,
    /// `mean D(real) - mean D(fake)`.
    pub wasserstein: Var<'t>,
    pub penalty: Var<'t>,
}

/// `mean D(fake) - mean D(real) + gp_coef · penalty`, with both batches
/// treated as constants.
pub fn wgan_gp_critic_loss<'t, C: Critic<'t>>(
    critic: &C,
    tape: &'t Tape,
    real: &Tensor,
    fake: &Tensor,
    gp_coef: f32,
    mix: &[f32],
) -> Result<CriticLoss<'t>> {
    if real.shape() != fake.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "wgan_gp_critic_loss",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    let d_real = critic.score(tape.constant(real.clone()))?.mean();
    let d_fake = critic.score(tape.constant(fake.clone()))?.mean();
    let wasserstein = d_real.sub(d_fake)?;
    let penalty = gradient_penalty(critic, tape, real, fake, mix)?;
    let loss = penalty.scale(gp_coef).sub(wasserstein)?;
    Ok(CriticLoss {
        loss,
        wasserstein,
        penalty,
    })
}

/// `-mean D(fake) + ε·(CE(fake logits, labels) + CE(real logits, labels_real))`.
/// The real-batch logits are constants, so that term never reaches the
/// policy.
pub fn policy_loss<'t>(
    scores_fake: Var<'t>,
    logits_fake: Var<'t>,
    labels: &[usize],
    logits_real: &Tensor,
    labels_real: &[usize],
    eps: f32,
) -> Result<(Var<'t>, Var<'t>)> {
    let tape = scores_fake.tape();
    let cls = logits_fake
        .cross_entropy(labels)?
        .add(tape.constant(logits_real.clone()).cross_entropy(labels_real)?)?;
    let loss = cls.scale(eps).sub(scores_fake.mean())?;
    Ok((loss, cls))
}
