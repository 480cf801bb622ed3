//! Critic network: a small strided conv backbone shared by a two-layer
//! perceptron critic head and a linear classification head.

use augsearch_autodiff::{AutodiffError, Result, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Anything that scores images and can express the input-gradient of the
/// summed score as a differentiable function of its own parameters.
pub trait Critic<'t> {
    /// Per-image scores `[N]`.
    fn score(&self, x: Var<'t>) -> Result<Var<'t>>;

    /// `∂(Σ_i score_i)/∂x`, recorded on the tape so that a loss of it can be
    /// differentiated w.r.t. the critic parameters with a first-order sweep.
    fn input_gradient(&self, x: Var<'t>) -> Result<Var<'t>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub widths: [usize; 3],
    pub hidden: usize,
}

impl CriticConfig {
    pub fn new(in_channels: usize, classes: usize) -> Self {
        CriticConfig {
            in_channels,
            classes,
            widths: [16, 32, 64],
            hidden: 64,
        }
    }

    /// Parameter shapes in storage order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let [a, b, c] = self.widths;
        let ci = self.in_channels;
        vec![
            vec![a, ci, 3, 3],
            vec![1, a, 1, 1],
            vec![b, a, 3, 3],
            vec![1, b, 1, 1],
            vec![c, b, 3, 3],
            vec![1, c, 1, 1],
            vec![c, self.hidden],
            vec![self.hidden],
            vec![self.hidden, 1],
            vec![1],
            vec![c, self.classes],
            vec![self.classes],
        ]
    }
}

const STRIDE: usize = 2;
const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CriticNet {
    pub config: CriticConfig,
    pub params: Vec<Tensor>,
}

impl CriticNet {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(config: CriticConfig, rng: &mut impl Rng) -> Self {
        let shapes = config.shapes();
        let fan_ins: Vec<usize> = shapes
            .chunks(2)
            .map(|pair| {
                let w = &pair[0];
                if w.len() == 4 {
                    w[1] * w[2] * w[3]
                } else {
                    w[0]
                }
            })
            .collect();
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let bound = 1.0 / (fan_ins[i / 2] as f32).sqrt();
                let d = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(s, |_| d.sample(rng))
            })
            .collect();
        CriticNet { config, params }
    }

    pub fn zeros(config: CriticConfig) -> Self {
        let params = config.shapes().iter().map(|s| Tensor::zeros(s)).collect();
        CriticNet { config, params }
    }

    pub fn flat(&self) -> Vec<f32> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f32]) {
        let mut off = 0;
        for t in &mut self.params {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    pub fn from_flat(config: CriticConfig, flat: &[f32]) -> Self {
        let mut net = CriticNet::zeros(config);
        net.set_flat(flat);
        net
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundCritic<'t> {
        BoundCritic {
            config: self.config.clone(),
            vars: self
                .params
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

pub struct BoundCritic<'t> {
    pub config: CriticConfig,
    pub vars: Vec<Var<'t>>,
}

/// Outputs of a critic forward pass plus the pre-activations needed to
/// build the input-gradient chain.
pub struct CriticPass<'t> {
    pub scores: Var<'t>,
    pub logits: Var<'t>,
    conv_pre: [Var<'t>; 3],
    hidden_pre: Var<'t>,
}

fn relu_mask(v: &Tensor) -> Tensor {
    v.map(|x| if x > 0.0 { 1.0 } else { 0.0 })
}

impl<'t> BoundCritic<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<CriticPass<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(AutodiffError::ShapeMismatch {
                op: "critic input (expected [N, in_channels, H, W])",
                lhs: shape,
                rhs: vec![self.config.in_channels],
            });
        }
        let n = shape[0];
        let v = &self.vars;
        let mut h = x;
        let mut conv_pre = Vec::with_capacity(3);
        for layer in 0..3 {
            let pre = h.conv2d(v[2 * layer], STRIDE, PADDING)?.add(v[2 * layer + 1])?;
            conv_pre.push(pre);
            h = pre.relu();
        }
        let features = h.mean_axes(&[2, 3], false)?;
        let hidden_pre = features.matmul(v[6])?.add(v[7])?;
        let scores = hidden_pre.relu().matmul(v[8])?.add(v[9])?.reshape(&[n])?;
        let logits = features.matmul(v[10])?.add(v[11])?;
        Ok(CriticPass {
            scores,
            logits,
            conv_pre: [conv_pre[0], conv_pre[1], conv_pre[2]],
            hidden_pre,
        })
    }

    /// Input-gradient chain given a completed forward pass on `x`.
    pub fn input_gradient_from(&self, pass: &CriticPass<'t>, x_hw: (usize, usize)) -> Result<Var<'t>> {
        let v = &self.vars;
        let n = pass.scores.shape()[0];
        // d score / d hidden pre-activation.
        let g_hidden = v[8].t()?.mul_const(relu_mask(&pass.hidden_pre.value()))?;
        let g_features = g_hidden.matmul(v[6].t()?)?;
        let c3 = pass.conv_pre[2].shape();
        let spatial = (c3[2] * c3[3]) as f32;
        let mut g = g_features
            .reshape(&[n, c3[1], 1, 1])?
            .scale(1.0 / spatial)
            .mul_const(relu_mask(&pass.conv_pre[2].value()))?;
        for layer in (0..3).rev() {
            let in_hw = if layer == 0 {
                x_hw
            } else {
                let s = pass.conv_pre[layer - 1].shape();
                (s[2], s[3])
            };
            g = g.conv2d_input_grad(v[2 * layer], in_hw, STRIDE, PADDING)?;
            if layer > 0 {
                g = g.mul_const(relu_mask(&pass.conv_pre[layer - 1].value()))?;
            }
        }
        Ok(g)
    }

    pub fn grads(&self, tape: &Tape) -> Vec<f32> {
        self.vars
            .iter()
            .flat_map(|&v| tape.grad_or_zeros(v).into_data())
            .collect()
    }
}

impl<'t> Critic<'t> for BoundCritic<'t> {
    fn score(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward(x)?.scores)
    }

    fn input_gradient(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let pass = self.forward(x)?;
        self.input_gradient_from(&pass, (s[2], s[3]))
    }
}

/// Fixed linear critic `D(x) = Σ w ⊙ x` with a constant input-gradient.
pub struct LinearCritic<'t> {
    pub tape: &'t Tape,
    /// `[C,H,W]` weights.
    pub weight: Tensor,
}

impl<'t> LinearCritic<'t> {
    /// Uniform weights `1/sqrt(C·H·W)`, whose gradient has unit norm.
    pub fn unit_norm(tape: &'t Tape, shape: [usize; 3]) -> Self {
        let count = shape.iter().product::<usize>() as f32;
        LinearCritic {
            tape,
            weight: Tensor::full(&shape, 1.0 / count.sqrt()),
        }
    }
}

impl<'t> Critic<'t> for LinearCritic<'t> {
    fn score(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.mul_const(self.weight.clone())?.sum_axes(&[1, 2, 3], false)
    }

    fn input_gradient(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let per = self.weight.numel();
        let data = self.weight.data().repeat(s[0]);
        if per * s[0] != x.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear critic",
                lhs: s,
                rhs: self.weight.shape().to_vec(),
            });
        }
        Ok(self.tape.constant(Tensor::new(s, data)?))
    }
}
