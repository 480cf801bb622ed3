//! Policies: L sub-policies of K stages, each stage a softmax mixture over
//! candidate operations with a relaxed Bernoulli gate per operation.

use crate::augment::{self, dims, OpDraws};
use crate::ops::OpKind;
use crate::rng::stream;
use augsearch_autodiff::{AutodiffError, Result, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Open01, Uniform};
use serde::{Deserialize, Serialize};

/// How raw learnable values map to the effective probability p and
/// magnitude μ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMap {
    /// `p = sigmoid(raw)`, `μ = sigmoid(raw)`.
    Sigmoid,
    /// `p = raw`, `μ = raw`, kept in `[0,1]` by projecting after each update.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Search,
    Inference,
}

/// Probabilities are kept this far from 0 and 1 inside the gate's logit.
const LOGIT_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    #[serde(with = "crate::bits::vec_f32")]
    pub weights: Vec<f32>,
    #[serde(with = "crate::bits::vec_f32")]
    pub prob: Vec<f32>,
    #[serde(with = "crate::bits::vec_f32")]
    pub mag: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubPolicy {
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Candidate operations of every stage, in mixture order.
    pub ops: Vec<OpKind>,
    pub sub_policies: Vec<SubPolicy>,
    pub lambda: f32,
    pub eta: f32,
    pub param_map: ParamMap,
    pub mode: Mode,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("sub-policy count and stage count must be at least 1 (got L={l}, K={k})")]
    EmptyStructure { l: usize, k: usize },
    #[error("temperatures must be positive (lambda={lambda}, eta={eta})")]
    Temperature { lambda: f32, eta: f32 },
    #[error("the operation set is empty")]
    NoOps,
    #[error("chunk size must be at least 1")]
    ChunkSize,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl Stage {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl ParamMap {
    pub fn effective(self, raw: f32) -> f32 {
        match self {
            ParamMap::Sigmoid => augsearch_autodiff::sigmoid(raw),
            ParamMap::Direct => raw.clamp(0.0, 1.0),
        }
    }

    /// Raw value centered at an effective value of one half.
    fn center(self) -> f32 {
        match self {
            ParamMap::Sigmoid => 0.0,
            ParamMap::Direct => 0.5,
        }
    }

    fn effective_var(self, raw: Var<'_>) -> Var<'_> {
        match self {
            ParamMap::Sigmoid => raw.sigmoid(),
            ParamMap::Direct => raw.clamp01(),
        }
    }

    fn logit_var(self, raw: Var<'_>) -> Var<'_> {
        match self {
            ParamMap::Sigmoid => raw,
            ParamMap::Direct => {
                let p = raw.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
                p.ln().sub(p.rsub_scalar(1.0).ln()).expect("scalar shapes")
            }
        }
    }
}

impl Policy {
    /// Fresh policy: mixture weights uniform in ±1e-3, probability and
    /// magnitude at one half plus N(0, 0.01²) noise in raw space.
    pub fn init(
        ops: &[OpKind],
        l: usize,
        k: usize,
        lambda: f32,
        eta: f32,
        param_map: ParamMap,
        rng: &mut impl Rng,
    ) -> std::result::Result<Policy, PolicyError> {
        if l == 0 || k == 0 {
            return Err(PolicyError::EmptyStructure { l, k });
        }
        if ops.is_empty() {
            return Err(PolicyError::NoOps);
        }
        check_temperatures(lambda, eta)?;
        let m = ops.len();
        let wdist = Uniform::new_inclusive(-1e-3f32, 1e-3);
        let noise = Normal::new(0.0f32, 0.01).expect("valid normal");
        let c = param_map.center();
        let mut sub_policies = Vec::with_capacity(l);
        for _ in 0..l {
            let mut stages = Vec::with_capacity(k);
            for _ in 0..k {
                let weights = (0..m).map(|_| wdist.sample(rng)).collect();
                let prob = (0..m).map(|_| c + noise.sample(rng)).collect();
                let mag = (0..m).map(|_| c + noise.sample(rng)).collect();
                stages.push(Stage { weights, prob, mag });
            }
            sub_policies.push(SubPolicy { stages });
        }
        Ok(Policy {
            ops: ops.to_vec(),
            sub_policies,
            lambda,
            eta,
            param_map,
            mode: Mode::Search,
        })
    }

    /// Inference-mode policy with every stage drawn at random: mixture
    /// weights, probabilities and magnitudes uniform in `[0,1]`.
    pub fn random(
        ops: &[OpKind],
        l: usize,
        k: usize,
        lambda: f32,
        eta: f32,
        rng: &mut impl Rng,
    ) -> std::result::Result<Policy, PolicyError> {
        let mut p = Policy::init(ops, l, k, lambda, eta, ParamMap::Direct, rng)?;
        let unit = Uniform::new_inclusive(0.0f32, 1.0);
        for st in p.sub_policies.iter_mut().flat_map(|s| s.stages.iter_mut()) {
            for v in st.weights.iter_mut().chain(&mut st.prob).chain(&mut st.mag) {
                *v = unit.sample(rng);
            }
        }
        p.mode = Mode::Inference;
        Ok(p)
    }

    pub fn l(&self) -> usize {
        self.sub_policies.len()
    }

    pub fn k(&self) -> usize {
        self.sub_policies.first().map_or(0, |s| s.stages.len())
    }

    pub fn prob(&self, sp: usize, stage: usize, op: usize) -> f32 {
        self.param_map
            .effective(self.sub_policies[sp].stages[stage].prob[op])
    }

    pub fn magnitude(&self, sp: usize, stage: usize, op: usize) -> f32 {
        self.param_map
            .effective(self.sub_policies[sp].stages[stage].mag[op])
    }

    /// Flat copy of every learnable value: per sub-policy, per stage,
    /// weights then raw probabilities then raw magnitudes.
    pub fn flat(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for sp in &self.sub_policies {
            for st in &sp.stages {
                out.extend(&st.weights);
                out.extend(&st.prob);
                out.extend(&st.mag);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f32]) {
        let mut off = 0;
        let mut take = |dst: &mut Vec<f32>| {
            let n = dst.len();
            dst.copy_from_slice(&flat[off..off + n]);
            off += n;
        };
        for sp in &mut self.sub_policies {
            for st in &mut sp.stages {
                take(&mut st.weights);
                take(&mut st.prob);
                take(&mut st.mag);
            }
        }
        assert_eq!(off, flat.len(), "flat parameter length");
    }

    /// Keeps directly parameterized probabilities and magnitudes in `[0,1]`.
    pub fn project(&mut self) {
        if self.param_map == ParamMap::Direct {
            for st in self.sub_policies.iter_mut().flat_map(|s| s.stages.iter_mut()) {
                for v in st.prob.iter_mut().chain(st.mag.iter_mut()) {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    /// Records the parameters on `tape`. With `trainable`, gradients are
    /// collected by [`BoundPolicy::grads`].
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundPolicy<'t> {
        let m = self.ops.len();
        let leaf = |v: &Vec<f32>| tape.leaf(Tensor::new(vec![m], v.clone()).expect("len"), trainable);
        BoundPolicy {
            stages: self
                .sub_policies
                .iter()
                .map(|sp| {
                    sp.stages
                        .iter()
                        .map(|st| StageVars {
                            weights: leaf(&st.weights),
                            prob: leaf(&st.prob),
                            mag: leaf(&st.mag),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Search-mode forward over a batch: the batch is cut into chunks of
    /// `chunk_size`, each chunk gets a uniformly drawn sub-policy, and each
    /// chunk's randomness comes from its own stream keyed by `(seed, chunk)`.
    pub fn forward_search<'t>(
        &self,
        bound: &BoundPolicy<'t>,
        x: Var<'t>,
        chunk_size: usize,
        seed: u64,
    ) -> std::result::Result<Var<'t>, PolicyError> {
        let [n, _, _, _] = dims(&x.shape())?;
        if chunk_size == 0 {
            return Err(PolicyError::ChunkSize);
        }
        let mut parts = Vec::new();
        for (ci, start) in (0..n).step_by(chunk_size).enumerate() {
            let len = chunk_size.min(n - start);
            let mut rng = stream(seed, &[ci as u64]);
            let sp = rng.gen_range(0..self.l());
            let chunk = x.narrow0(start, len)?;
            parts.push(self.subpolicy_search(bound, sp, chunk, &mut rng)?);
        }
        Ok(x.tape().concat0(&parts)?)
    }

    /// Applies sub-policy `sp` in search mode: stages in order, then a final
    /// clamp to `[0,1]`.
    pub fn subpolicy_search<'t>(
        &self,
        bound: &BoundPolicy<'t>,
        sp: usize,
        x: Var<'t>,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        let [n, _, h, w] = dims(&x.shape())?;
        let mut cur = x;
        for vars in &bound.stages[sp] {
            let draws = StageDraws::sample(&self.ops, n, h, w, rng);
            cur = self.stage_search(vars, cur, &draws, augment::apply)?;
        }
        Ok(cur.clamp01())
    }

    /// One stage in search mode: `Σ_n softmax_η(w)_n · gate_n(op_n(x))`.
    /// `op` computes each candidate's output (normally [`augment::apply`]).
    pub fn stage_search<'t>(
        &self,
        vars: &StageVars<'t>,
        x: Var<'t>,
        draws: &StageDraws,
        op: impl Fn(OpKind, Var<'t>, Var<'t>, &OpDraws) -> Result<Var<'t>>,
    ) -> Result<Var<'t>> {
        let mix = vars.weights.softmax(self.eta)?;
        let mut acc: Option<Var<'t>> = None;
        for (i, &kind) in self.ops.iter().enumerate() {
            let mu = self.param_map.effective_var(vars.mag.index(i)?);
            let out = op(kind, x, mu, &draws.ops[i])?;
            let logit = self.param_map.logit_var(vars.prob.index(i)?);
            let gated = relaxed_gate(out, x, logit, &draws.uniforms[i], self.lambda)?;
            let term = gated.mul(mix.index(i)?)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one op"))
    }

    /// Inference-mode application: per chunk one sub-policy, per stage one
    /// operation drawn from `Cat(softmax_η(w))`, applied to each image with
    /// probability p. Returns the augmented batch and what was applied.
    pub fn apply_inference(
        &self,
        x: &Tensor,
        chunk_size: usize,
        seed: u64,
    ) -> std::result::Result<(Tensor, Vec<ChunkTrace>), PolicyError> {
        let [n, _, h, w] = dims(x.shape())?;
        if chunk_size == 0 {
            return Err(PolicyError::ChunkSize);
        }
        let mut parts = Vec::new();
        let mut traces = Vec::new();
        for (ci, start) in (0..n).step_by(chunk_size).enumerate() {
            let len = chunk_size.min(n - start);
            let mut rng = stream(seed, &[ci as u64]);
            let sp = rng.gen_range(0..self.l());
            let mut cur = x.narrow0(start, len)?;
            let mut stages = Vec::new();
            for (si, st) in self.sub_policies[sp].stages.iter().enumerate() {
                let probs = categorical_probs(&st.weights, self.eta);
                let op = sample_categorical(&probs, &mut rng);
                let kind = self.ops[op];
                let p = self.prob(sp, si, op);
                let mu = self.magnitude(sp, si, op);
                let draws = OpDraws::sample(kind, len, h, w, &mut rng);
                let applied: Vec<bool> = (0..len).map(|_| bernoulli(p, &mut rng)).collect();
                if applied.iter().any(|&a| a) {
                    let out = augment::apply_value(kind, &cur, mu, &draws)?;
                    let rows: Vec<Tensor> = applied
                        .iter()
                        .enumerate()
                        .map(|(i, &a)| if a { out.narrow0(i, 1) } else { cur.narrow0(i, 1) })
                        .collect::<Result<_>>()?;
                    cur = Tensor::concat0(&rows)?;
                }
                stages.push(StageTrace {
                    op: kind,
                    magnitude: mu,
                    applied,
                });
            }
            parts.push(cur.map(|v| v.clamp(0.0, 1.0)));
            traces.push(ChunkTrace {
                start,
                len,
                sub_policy: sp,
                stages,
            });
        }
        Ok((Tensor::concat0(&parts)?, traces))
    }
}

fn check_temperatures(lambda: f32, eta: f32) -> std::result::Result<(), PolicyError> {
    if lambda > 0.0 && eta > 0.0 && lambda.is_finite() && eta.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::Temperature { lambda, eta })
    }
}

/// Parameters of one stage recorded on a tape.
#[derive(Clone, Copy)]
pub struct StageVars<'t> {
    pub weights: Var<'t>,
    pub prob: Var<'t>,
    pub mag: Var<'t>,
}

pub struct BoundPolicy<'t> {
    /// `stages[sub_policy][stage]`.
    pub stages: Vec<Vec<StageVars<'t>>>,
}

impl BoundPolicy<'_> {
    /// Gradients in the order of [`Policy::flat`]; untouched parameters get
    /// zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<f32> {
        let mut out = Vec::new();
        for st in self.stages.iter().flatten() {
            for v in [st.weights, st.prob, st.mag] {
                out.extend(tape.grad_or_zeros(v).into_data());
            }
        }
        out
    }
}

/// Randomness of one search-mode stage: per operation, its own draws and one
/// uniform per image for the gate.
#[derive(Clone, Debug)]
pub struct StageDraws {
    pub ops: Vec<OpDraws>,
    pub uniforms: Vec<Vec<f64>>,
}

impl StageDraws {
    pub fn sample(ops: &[OpKind], n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut draws = Vec::with_capacity(ops.len());
        let mut uniforms = Vec::with_capacity(ops.len());
        for &kind in ops {
            draws.push(OpDraws::sample(kind, n, h, w, rng));
            uniforms.push((0..n).map(|_| Open01.sample(rng)).collect());
        }
        StageDraws {
            ops: draws,
            uniforms,
        }
    }
}

/// Relaxed Bernoulli gate: `b = sigmoid((logit p + logit u) / λ)` per image,
/// output `b·op_out + (1 - b)·x`.
pub fn relaxed_gate<'t>(
    op_out: Var<'t>,
    x: Var<'t>,
    p_logit: Var<'t>,
    uniforms: &[f64],
    lambda: f32,
) -> Result<Var<'t>> {
    if !(lambda > 0.0) {
        return Err(AutodiffError::Invalid(format!(
            "relaxed Bernoulli temperature must be positive, got {lambda}"
        )));
    }
    let n = x.shape()[0];
    if uniforms.len() != n || op_out.shape() != x.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "relaxed_gate",
            lhs: op_out.shape(),
            rhs: x.shape(),
        });
    }
    let logit_u = uniforms.iter().map(|&u| (u / (1.0 - u)).ln() as f32).collect();
    let logit_u = Tensor::new(vec![n, 1, 1, 1], logit_u)?;
    let b = p_logit.add_const(logit_u)?.scale(1.0 / lambda).sigmoid();
    op_out.mul(b)?.add(x.mul(b.rsub_scalar(1.0))?)
}

/// `softmax(weights / eta)` in double precision.
pub fn categorical_probs(weights: &[f32], eta: f32) -> Vec<f64> {
    let eta = eta as f64;
    let max = weights.iter().map(|&w| w as f64).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = weights.iter().map(|&w| ((w as f64 - max) / eta).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn bernoulli(p: f32, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < p as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTrace {
    pub op: OpKind,
    pub magnitude: f32,
    pub applied: Vec<bool>,
}

/// What inference-mode application did to one chunk.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChunkTrace {
    pub start: usize,
    pub len: usize,
    pub sub_policy: usize,
    pub stages: Vec<StageTrace>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(n: usize) -> Tensor {
        Tensor::from_fn(&[n, 3, 6, 6], |i| ((i * 29) % 97) as f32 / 96.0)
    }

    #[test]
    fn midpoint_gate() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.2));
        let o = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.8));
        let out = relaxed_gate(o, x, tape.scalar(0.0), &[0.5], 0.05).unwrap();
        assert!(out.value().data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(relaxed_gate(o, x, tape.scalar(0.0), &[0.5], 0.0).is_err());
    }

    #[test]
    fn init_is_near_uniform_and_deterministic() {
        let mk = || {
            Policy::init(&OpKind::ALL, 10, 2, 0.05, 0.05, ParamMap::Sigmoid, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
        };
        let p = mk();
        assert_eq!(p, mk());
        assert_eq!((p.l(), p.k()), (10, 2));
        for st in p.sub_policies.iter().flat_map(|s| &s.stages) {
            let probs = categorical_probs(&st.weights, 0.05);
            let uniform = 1.0 / 17.0;
            assert!(probs.iter().all(|&q| (q - uniform).abs() < 0.01));
        }
        for v in p.flat() {
            assert!(v.abs() < 0.06, "{v}");
        }
    }

    #[test]
    fn init_rejects_bad_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Policy::init(&OpKind::ALL, 0, 2, 0.05, 0.05, ParamMap::Sigmoid, &mut rng).is_err());
        assert!(Policy::init(&OpKind::ALL, 1, 1, 0.0, 0.05, ParamMap::Sigmoid, &mut rng).is_err());
        assert!(Policy::init(&[], 1, 1, 0.05, 0.05, ParamMap::Sigmoid, &mut rng).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut p = Policy::init(&OpKind::ALL, 2, 2, 0.05, 0.05, ParamMap::Direct, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut f = p.flat();
        assert_eq!(f.len(), 2 * 2 * 3 * 17);
        f[0] = 9.0;
        p.set_flat(&f);
        assert_eq!(p.flat(), f);
    }

    #[test]
    fn identity_stub_mixture_returns_input() {
        let p = Policy::init(&OpKind::ALL, 1, 1, 0.05, 0.05, ParamMap::Sigmoid, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape, true);
        let x = image(2);
        let xv = tape.constant(x.clone());
        let draws = StageDraws::sample(&p.ops, 2, 6, 6, &mut ChaCha8Rng::seed_from_u64(3));
        let out = p
            .stage_search(&bound.stages[0][0], xv, &draws, |_, x, _, _| Ok(x))
            .unwrap();
        assert!(out.value().max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn double_invert_is_identity() {
        let ops = [OpKind::Invert, OpKind::Flip];
        let mut p = Policy::init(&ops, 1, 2, 0.05, 1e-4, ParamMap::Direct, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for st in &mut p.sub_policies[0].stages {
            st.weights = vec![1.0, 0.0];
            st.prob = vec![1.0, 1.0];
        }
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let x = image(3);
        let out = p
            .subpolicy_search(&bound, 0, tape.constant(x.clone()), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(out.value().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn chunked_forward_preserves_order_and_is_reproducible() {
        let p = Policy::init(&OpKind::ALL, 3, 2, 0.05, 0.05, ParamMap::Sigmoid, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let x = image(5);
        let run = || {
            let tape = Tape::new();
            let bound = p.bind(&tape, true);
            let y = p.forward_search(&bound, tape.constant(x.clone()), 2, 11).unwrap();
            y.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
        assert_eq!(run().len(), x.numel());
        let tape = Tape::new();
        let bound = p.bind(&tape, true);
        assert!(p.forward_search(&bound, tape.constant(x), 0, 1).is_err());
    }

    #[test]
    fn inference_with_zero_probability_is_bitwise_identity() {
        let mut p = Policy::init(&OpKind::ALL, 4, 2, 0.05, 0.05, ParamMap::Direct, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        for st in p.sub_policies.iter_mut().flat_map(|s| s.stages.iter_mut()) {
            st.prob.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = image(7);
        let (y, traces) = p.apply_inference(&x, 3, 9).unwrap();
        assert_eq!(y, x);
        assert_eq!(traces.len(), 3);
        assert!(traces.iter().all(|t| t.stages.len() == 2));
    }

    #[test]
    fn inference_with_certain_probability_always_applies() {
        let mut p = Policy::init(&[OpKind::Invert], 1, 1, 0.05, 0.05, ParamMap::Sigmoid, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        p.sub_policies[0].stages[0].prob = vec![80.0];
        let x = image(4);
        let (y, _) = p.apply_inference(&x, 2, 1).unwrap();
        let inv = x.map(|v| 1.0 - v);
        assert_eq!(y, inv);
    }

    #[test]
    fn categorical_sharpens_at_low_temperature() {
        let probs = categorical_probs(&[0.1, 0.3, 0.2], 1e-5);
        assert!(probs[1] > 1.0 - 1e-6);
        let s: f64 = categorical_probs(&[0.5, -1.0, 2.0, 0.0], 0.7).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
