//! Finite-difference checks of every differentiable path: operations,
//! the relaxed gate, stage mixtures, sub-policy chains and the critic.

use crate::augment::{self, OpDraws};
use crate::critic::{CriticConfig, CriticNet};
use crate::objective::{gradient_penalty, penalty_mix};
use crate::ops::{MagnitudeClass, OpKind};
use crate::policy::{relaxed_gate, BoundPolicy, ParamMap, Policy, StageDraws, StageVars};
use augsearch_autodiff::numeric::{central_difference, relative_error};
use augsearch_autodiff::{Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Central-difference step.
pub const STEP: f32 = 1e-3;
/// Max-norm relative tolerance.
pub const TOLERANCE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// Analytic gradient against central differences.
    FiniteDifference,
    /// Straight-through magnitude gradient must be exactly one per pixel.
    StraightThrough,
    /// Gradient against a closed form that holds statistics fixed.
    ClosedForm,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub op: Option<OpKind>,
    pub wrt: String,
    pub kind: CheckKind,
    /// Max-norm relative error, or the largest deviation from one for
    /// straight-through rows.
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradRow {
    fn new(name: &str, op: Option<OpKind>, wrt: &str, kind: CheckKind, error: f64, tolerance: f64) -> Self {
        GradRow {
            name: name.to_string(),
            op,
            wrt: wrt.to_string(),
            kind,
            error,
            tolerance,
            passed: error.is_finite() && error <= tolerance,
        }
    }

    fn failed(name: &str, op: Option<OpKind>, wrt: &str, kind: CheckKind) -> Self {
        let mut r = GradRow::new(name, op, wrt, kind, f64::NAN, TOLERANCE);
        r.passed = false;
        r
    }
}

/// Fixed projection weights for reducing an output to a scalar loss.
fn weights_for(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

fn weighted_sum(out: &Tensor, c: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(c.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Relative error between the reverse-mode gradient of `Σ c ⊙ f(p)` and its
/// central difference, with `f` rebuilt on a fresh tape for each probe.
pub fn check_function(p0: &Tensor, f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.param(p0.clone());
    let out = f(p)?;
    let c = weights_for(&out.shape());
    out.mul_const(c.clone())?.sum().backward()?;
    let analytic = tape.grad_or_zeros(p);
    let numeric = central_difference(
        |probe| {
            let tape = Tape::new();
            let out = f(tape.constant(probe.clone())).expect("evaluates at probe");
            weighted_sum(&out.value(), &c)
        },
        p0,
        STEP,
    );
    Ok(relative_error(&analytic, &numeric))
}

/// Images in `[0.3, 0.7]`, away from clamp saturation.
fn images(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.3f32..0.7))
}

const SHAPE: [usize; 4] = [2, 3, 8, 8];
const MU: f32 = 0.6;

fn draws_for(kind: OpKind, seed: u64) -> OpDraws {
    let mut draws = OpDraws::sample(kind, SHAPE[0], SHAPE[2], SHAPE[3], &mut ChaCha8Rng::seed_from_u64(seed));
    if kind == OpKind::SamplePairing {
        // A shuffle of two images may be the identity, which would make
        // the blend a no-op.
        draws.pairing = (0..SHAPE[0]).rev().collect();
    }
    draws
}

fn op_rows(kind: OpKind, seed: u64) -> Vec<GradRow> {
    let name = kind.name();
    let x0 = images(&SHAPE, seed);
    let draws = draws_for(kind, seed);
    let mut rows = Vec::new();
    let fd = |wrt: &str, r: Result<f64>| match r {
        Ok(e) => GradRow::new(name, Some(kind), wrt, CheckKind::FiniteDifference, e, TOLERANCE),
        Err(_) => GradRow::failed(name, Some(kind), wrt, CheckKind::FiniteDifference),
    };
    match kind.magnitude_class() {
        MagnitudeClass::Continuous => {
            let r = check_function(&Tensor::scalar(MU), |mu| {
                augment::apply(kind, mu.tape().constant(x0.clone()), mu, &draws)
            });
            rows.push(fd("magnitude", r));
            let r = check_function(&x0, |x| augment::apply(kind, x, x.tape().scalar(MU), &draws));
            rows.push(fd("input", r));
        }
        MagnitudeClass::Discrete => {
            rows.push(match straight_through_deviation(kind, &x0, &draws, seed) {
                Ok(e) => GradRow::new(name, Some(kind), "magnitude", CheckKind::StraightThrough, e, 0.0),
                Err(_) => GradRow::failed(name, Some(kind), "magnitude", CheckKind::StraightThrough),
            });
        }
        MagnitudeClass::None => match kind {
            OpKind::AutoContrast => rows.push(match auto_contrast_deviation(&x0) {
                Ok(e) => GradRow::new(name, Some(kind), "input", CheckKind::ClosedForm, e, 1e-6),
                Err(_) => GradRow::failed(name, Some(kind), "input", CheckKind::ClosedForm),
            }),
            OpKind::Equalize => rows.push(match identity_deviation(kind, &x0) {
                Ok(e) => GradRow::new(name, Some(kind), "input", CheckKind::StraightThrough, e, 0.0),
                Err(_) => GradRow::failed(name, Some(kind), "input", CheckKind::StraightThrough),
            }),
            _ => {
                let r = check_function(&x0, |x| augment::apply(kind, x, x.tape().scalar(MU), &draws));
                rows.push(fd("input", r));
            }
        },
    }
    rows
}

/// Largest `|∂out_j/∂μ - 1|` over a sample of pixels, each probed with a
/// one-hot backward pass.
fn straight_through_deviation(kind: OpKind, x0: &Tensor, draws: &OpDraws, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut worst = 0.0f64;
    for _ in 0..16 {
        let j = rng.gen_range(0..x0.numel());
        let tape = Tape::new();
        let mu = tape.param(Tensor::scalar(MU));
        let out = augment::apply(kind, tape.constant(x0.clone()), mu, draws)?;
        let onehot = Tensor::from_fn(x0.shape(), |i| if i == j { 1.0 } else { 0.0 });
        out.mul_const(onehot)?.sum().backward()?;
        let g = tape.grad_or_zeros(mu).item().unwrap_or(f32::NAN);
        worst = worst.max((g as f64 - 1.0).abs());
    }
    Ok(worst)
}

/// Largest deviation of `∂(Σ c ⊙ out)/∂x` from `c`.
fn identity_deviation(kind: OpKind, x0: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.param(x0.clone());
    let out = augment::apply(kind, x, tape.scalar(MU), &OpDraws::default())?;
    let c = weights_for(x0.shape());
    out.mul_const(c.clone())?.sum().backward()?;
    Ok(tape.grad_or_zeros(x).max_abs_diff(&c) as f64)
}

/// With per-channel minimum and range held fixed, `∂out/∂x = 1/range`.
fn auto_contrast_deviation(x0: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.param(x0.clone());
    let out = augment::apply(OpKind::AutoContrast, x, tape.scalar(MU), &OpDraws::default())?;
    out.sum().backward()?;
    let g = tape.grad_or_zeros(x);
    let [n, c, h, w] = SHAPE;
    let plane = h * w;
    let mut worst = 0.0f64;
    for p in 0..n * c {
        let vals = &x0.data()[p * plane..(p + 1) * plane];
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let expect = 1.0 / (hi - lo) as f64;
        for &gi in &g.data()[p * plane..(p + 1) * plane] {
            worst = worst.max((gi as f64 - expect).abs() / expect);
        }
    }
    Ok(worst)
}

/// Operations whose output is smooth in every input, used for the gate,
/// mixture and chain checks.
pub const SMOOTH_OPS: [OpKind; 9] = [
    OpKind::ShearX,
    OpKind::TranslateY,
    OpKind::Rotate,
    OpKind::Flip,
    OpKind::Invert,
    OpKind::Contrast,
    OpKind::Color,
    OpKind::Brightness,
    OpKind::Sharpness,
];

fn gate_rows() -> Vec<GradRow> {
    let x0 = images(&SHAPE, 11);
    let o0 = images(&SHAPE, 12);
    let uniforms = [0.38, 0.43];
    let mut rows = Vec::new();
    for (label, map, p, lambda) in [
        ("gate (sigmoid map)", ParamMap::Sigmoid, 0.4f32, 0.05f32),
        ("gate (direct map)", ParamMap::Direct, 0.6, 0.05),
        ("gate (warm temperature)", ParamMap::Sigmoid, -0.3, 0.5),
    ] {
        fn logit(map: ParamMap, raw: Var<'_>) -> Result<Var<'_>> {
            match map {
                ParamMap::Sigmoid => Ok(raw),
                ParamMap::Direct => raw.ln().sub(raw.rsub_scalar(1.0).ln()),
            }
        }
        let r = check_function(&Tensor::new(vec![1], vec![p]).expect("len"), |raw| {
            let t = raw.tape();
            relaxed_gate(t.constant(o0.clone()), t.constant(x0.clone()), logit(map, raw)?.reshape(&[])?, &uniforms, lambda)
        });
        rows.push(fd_row(label, "probability", r));
        let r = check_function(&o0, |o| {
            let t = o.tape();
            relaxed_gate(o, t.constant(x0.clone()), logit(map, t.scalar(p))?, &uniforms, lambda)
        });
        rows.push(fd_row(label, "operation output", r));
    }
    rows
}

fn fd_row(name: &str, wrt: &str, r: Result<f64>) -> GradRow {
    match r {
        Ok(e) => GradRow::new(name, None, wrt, CheckKind::FiniteDifference, e, TOLERANCE),
        Err(_) => GradRow::failed(name, None, wrt, CheckKind::FiniteDifference),
    }
}

/// Stage parameters laid out as `[weights | prob | mag]` per stage inside a
/// single vector, so one finite-difference sweep covers all of them.
fn split_stages<'t>(flat: Var<'t>, m: usize, stages: usize) -> Result<Vec<StageVars<'t>>> {
    (0..stages)
        .map(|s| {
            let base = 3 * m * s;
            Ok(StageVars {
                weights: flat.narrow0(base, m)?,
                prob: flat.narrow0(base + m, m)?,
                mag: flat.narrow0(base + 2 * m, m)?,
            })
        })
        .collect()
}

fn smooth_policy(k: usize, seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Policy::init(&SMOOTH_OPS, 1, k, 0.05, 0.05, ParamMap::Sigmoid, &mut rng).expect("valid structure");
    // Spread the weights so that every op contributes visibly.
    for st in &mut p.sub_policies[0].stages {
        for w in &mut st.weights {
            *w = rng.gen_range(-0.05..0.05);
        }
        for v in st.prob.iter_mut().chain(st.mag.iter_mut()) {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    p
}

fn mixture_rows() -> Vec<GradRow> {
    let m = SMOOTH_OPS.len();
    let x0 = images(&SHAPE, 21);
    let mut rows = Vec::new();

    let policy = smooth_policy(1, 22);
    let draws = StageDraws::sample(&SMOOTH_OPS, SHAPE[0], SHAPE[2], SHAPE[3], &mut ChaCha8Rng::seed_from_u64(23));
    let r = check_function(&Tensor::new(vec![3 * m], policy.flat()).expect("len"), |flat| {
        let vars = split_stages(flat, m, 1)?;
        policy.stage_search(&vars[0], flat.tape().constant(x0.clone()), &draws, augment::apply)
    });
    rows.push(fd_row("stage mixture", "weights, probability, magnitude", r));

    let policy = smooth_policy(2, 24);
    let r = check_function(&Tensor::new(vec![6 * m], policy.flat()).expect("len"), |flat| {
        let bound = BoundPolicy {
            stages: vec![split_stages(flat, m, 2)?],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        policy.subpolicy_search(&bound, 0, flat.tape().constant(x0.clone()), &mut rng)
    });
    rows.push(fd_row("sub-policy chain (K=2)", "all stage parameters", r));
    rows
}

/// Compares reverse-mode critic parameter gradients of a scalar loss with
/// central differences on a random sample of coordinates.
fn critic_param_check(net: &CriticNet, loss: impl for<'t> Fn(&crate::critic::BoundCritic<'t>, &'t Tape) -> Result<Var<'t>>, coords: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let bound = net.bind(&tape, true);
    loss(&bound, &tape)?.backward()?;
    let all = bound.grads(&tape);
    let analytic = Tensor::new(vec![coords.len()], coords.iter().map(|&i| all[i]).collect())?;
    let base = net.flat();
    let eval = |flat: &[f32]| -> Result<f64> {
        let tape = Tape::new();
        let probe = CriticNet::from_flat(net.config.clone(), flat);
        let bound = probe.bind(&tape, false);
        Ok(loss(&bound, &tape)?.item().unwrap_or(f32::NAN) as f64)
    };
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = base.clone();
    for &i in coords {
        probe[i] = base[i] + STEP;
        let up = eval(&probe)?;
        probe[i] = base[i] - STEP;
        let down = eval(&probe)?;
        probe[i] = base[i];
        let step = (base[i] + STEP) as f64 - (base[i] - STEP) as f64;
        numeric.push(((up - down) / step) as f32);
    }
    Ok(relative_error(&analytic, &Tensor::new(vec![coords.len()], numeric)?))
}

fn critic_rows() -> Vec<GradRow> {
    let net = CriticNet::init(CriticConfig::new(3, 4), &mut ChaCha8Rng::seed_from_u64(31));
    let real = images(&SHAPE, 32);
    let fake = images(&SHAPE, 33);
    let labels = [1usize, 3];
    let mix = penalty_mix(SHAPE[0], &mut ChaCha8Rng::seed_from_u64(34));
    let mut coords: Vec<usize> = (0..net.flat().len()).collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(35));
    coords.truncate(96);
    coords.sort_unstable();

    let mut rows = Vec::new();
    let r = check_function(&real, |x| {
        let tape = x.tape();
        net.bind(tape, false).forward(x).map(|p| p.scores)
    });
    rows.push(fd_row("critic", "input", r));

    let r = critic_param_check(
        &net,
        |c, tape| {
            let pass = c.forward(tape.constant(real.clone()))?;
            pass.scores.mean().add(pass.logits.cross_entropy(&labels)?.scale(0.1))
        },
        &coords,
    );
    rows.push(fd_row("critic", "parameters (score and class loss)", r));

    let r = critic_param_check(&net, |c, tape| gradient_penalty(c, tape, &real, &fake, &mix), &coords);
    rows.push(fd_row("critic", "parameters (gradient penalty)", r));
    rows
}

/// Runs the suite. With `only`, just that operation's rows are produced.
pub fn run_suite(only: Option<OpKind>) -> Vec<GradRow> {
    let mut rows = Vec::new();
    for (i, &kind) in OpKind::ALL.iter().enumerate() {
        if only.map_or(true, |o| o == kind) {
            rows.extend(op_rows(kind, 100 + i as u64));
        }
    }
    if only.is_none() {
        rows.extend(gate_rows());
        rows.extend(mixture_rows());
        rows.extend(critic_rows());
    }
    rows
}

/// Plain-text table of the rows.
pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!("{:<26} {:<34} {:<18} {:>11} {:>9}  result\n", "check", "with respect to", "method", "error", "tol");
    for r in rows {
        let method = match r.kind {
            CheckKind::FiniteDifference => "finite difference",
            CheckKind::StraightThrough => "straight-through",
            CheckKind::ClosedForm => "closed form",
        };
        s.push_str(&format!(
            "{:<26} {:<34} {:<18} {:>11.3e} {:>9.1e}  {}\n",
            r.name,
            r.wrt,
            method,
            r.error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
