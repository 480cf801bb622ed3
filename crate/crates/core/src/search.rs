//! The policy search loop: alternate one critic update on (real, augmented)
//! batches with one policy update through the differentiable augmentation.

use crate::adam::Adam;
use crate::critic::{CriticConfig, CriticNet};
use crate::data::{epoch_order, DatasetBundle};
use crate::objective::{gradient_penalty, penalty_mix, policy_loss, LossReport};
use crate::ops::OpKind;
use crate::policy::{Mode, ParamMap, Policy, PolicyError};
use crate::rng::{derive_seed, purpose, stream};
use crate::synthetic::GroundTruth;
use augsearch_autodiff::{AutodiffError, Tape, Tensor};
use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: u64,
    /// Stops early after this many steps when set.
    pub max_steps: Option<u64>,
    pub l: usize,
    pub k: usize,
    pub lambda: f32,
    pub eta: f32,
    pub lr: f32,
    pub betas: (f32, f32),
    pub adam_eps: f32,
    /// Weight ε of the classification loss.
    pub cls_coef: f32,
    pub gp_coef: f32,
    pub chunk_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Critic updates per policy update; 0 freezes the critic.
    pub critic_steps: usize,
    pub ops: Vec<OpKind>,
    pub param_map: ParamMap,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 20,
            max_steps: None,
            l: 10,
            k: 2,
            lambda: 0.05,
            eta: 0.05,
            lr: 1e-3,
            betas: (0.0, 0.999),
            adam_eps: 1e-8,
            cls_coef: 0.1,
            gp_coef: 10.0,
            chunk_size: 8,
            batch_size: 32,
            seed: 0,
            critic_steps: 1,
            ops: OpKind::ALL.to_vec(),
            param_map: ParamMap::Sigmoid,
        }
    }
}

/// Consecutive non-finite steps tolerated before aborting.
pub const MAX_NONFINITE_STREAK: u32 = 10;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("dataset has {available} images; a step needs two disjoint batches of {batch_size}")]
    DatasetTooSmall { available: usize, batch_size: usize },
    #[error("source images are {source_dims:?} but target images are {target_dims:?}")]
    TargetShape {
        source_dims: (usize, usize, usize),
        target_dims: (usize, usize, usize),
    },
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("{streak} consecutive non-finite losses at step {step}; last report: {report:?}")]
    NonFinite { step: u64, streak: u32, report: LossReport },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub config: SearchConfig,
    pub policy: Policy,
    pub critic: CriticNet,
    pub policy_opt: Adam,
    pub critic_opt: Adam,
    pub step: u64,
    pub nonfinite_streak: u32,
    pub history: Vec<LossReport>,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Final policy in inference mode.
    pub policy: Policy,
    pub critic: CriticNet,
    pub history: Vec<LossReport>,
}

pub struct Searcher<'d> {
    pub state: SearchState,
    source: &'d DatasetBundle,
    target: &'d DatasetBundle,
}

fn validate(config: &SearchConfig, source: &DatasetBundle, target: &DatasetBundle) -> Result<(), SearchError> {
    if config.batch_size < 2 {
        return Err(SearchError::BatchSize(config.batch_size));
    }
    for d in [source, target] {
        if d.len() < 2 * config.batch_size {
            return Err(SearchError::DatasetTooSmall {
                available: d.len(),
                batch_size: config.batch_size,
            });
        }
    }
    if source.image_dims() != target.image_dims() {
        return Err(SearchError::TargetShape {
            source_dims: source.image_dims(),
            target_dims: target.image_dims(),
        });
    }
    Ok(())
}

impl<'d> Searcher<'d> {
    /// Fresh search. `target` supplies the real batches B′; when absent they
    /// come from `source`.
    pub fn new(config: SearchConfig, source: &'d DatasetBundle, target: Option<&'d DatasetBundle>) -> Result<Self, SearchError> {
        let target = target.unwrap_or(source);
        validate(&config, source, target)?;
        let policy = Policy::init(
            &config.ops,
            config.l,
            config.k,
            config.lambda,
            config.eta,
            config.param_map,
            &mut stream(config.seed, &[purpose::POLICY_INIT]),
        )?;
        let classes = source.class_count.max(target.class_count);
        let critic = CriticNet::init(
            CriticConfig::new(source.image_dims().0, classes),
            &mut stream(config.seed, &[purpose::CRITIC_INIT]),
        );
        let policy_opt = Adam::new(policy.flat().len(), config.lr, config.betas, config.adam_eps);
        let critic_opt = Adam::new(critic.flat().len(), config.lr, config.betas, config.adam_eps);
        Ok(Searcher {
            state: SearchState {
                config,
                policy,
                critic,
                policy_opt,
                critic_opt,
                step: 0,
                nonfinite_streak: 0,
                history: Vec::new(),
            },
            source,
            target,
        })
    }

    pub fn resume(state: SearchState, source: &'d DatasetBundle, target: Option<&'d DatasetBundle>) -> Result<Self, SearchError> {
        let target = target.unwrap_or(source);
        validate(&state.config, source, target)?;
        Ok(Searcher { state, source, target })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.source.len() / self.state.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let by_epochs = self.state.config.epochs * self.steps_per_epoch();
        self.state.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Indices of the source batch B and the real batch B′ for step `t`.
    pub fn batch_pair(&self, t: u64) -> (Vec<usize>, Vec<usize>) {
        let cfg = &self.state.config;
        let bs = cfg.batch_size;
        let spe = self.steps_per_epoch();
        let (epoch, i) = (t / spe, (t % spe) as usize);
        let order = epoch_order(self.source.len(), cfg.seed, epoch);
        let b = order[i * bs..(i + 1) * bs].to_vec();
        let mut taken = vec![false; self.target.len()];
        for &j in &b {
            if j < taken.len() {
                taken[j] = true;
            }
        }
        let mut pool: Vec<usize> = (0..self.target.len()).filter(|&j| !taken[j]).collect();
        let mut rng = stream(cfg.seed, &[purpose::PAIR_BATCH, t]);
        let (picked, _) = pool.partial_shuffle(&mut rng, bs);
        (b, picked.to_vec())
    }

    /// Runs one critic/policy update pair.
    pub fn step(&mut self) -> Result<LossReport, SearchError> {
        let t = self.state.step;
        let (b_idx, r_idx) = self.batch_pair(t);
        let (xb, yb) = self.source.select(&b_idx);
        let (xr, yr) = self.target.select(&r_idx);
        let st = &mut self.state;
        let cfg = st.config.clone();

        let tape = Tape::new();
        let bound = st.policy.bind(&tape, true);
        let aug_seed = derive_seed(cfg.seed, &[purpose::AUGMENT, t]);
        let augmented = st
            .policy
            .forward_search(&bound, tape.constant(xb), cfg.chunk_size, aug_seed)?;
        let fake = (*augmented.value()).clone();

        let mut penalty = 0.0;
        let mut critic_loss = 0.0;
        for j in 0..cfg.critic_steps {
            let (loss, gp) = critic_update(st, &cfg, &fake, &yb, &xr, &yr, t, j as u64)?;
            critic_loss = loss;
            penalty = gp;
        }

        let critic = st.critic.bind(&tape, false);
        let pass = critic.forward(augmented)?;
        let real_pass = critic.forward(tape.constant(xr))?;
        let wasserstein = real_pass.scores.mean().sub(pass.scores.mean())?;
        let (loss, cls) = policy_loss(pass.scores, pass.logits, &yb, &real_pass.logits.value(), &yr, cfg.cls_coef)?;
        let policy_value = loss.item().expect("scalar");
        if policy_value.is_finite() {
            loss.backward()?;
            let grads = bound.grads(&tape);
            let mut flat = st.policy.flat();
            st.policy_opt.step(&mut flat, &grads);
            st.policy.set_flat(&flat);
            st.policy.project();
        }

        let report = LossReport {
            step: t,
            wasserstein_estimate: wasserstein.item().expect("scalar") as f64,
            gradient_penalty: penalty,
            cls_loss: cls.item().expect("scalar") as f64,
            policy_loss: policy_value as f64,
            critic_loss,
        };
        debug!("step {t}: {report:?}");
        st.history.push(report);
        st.step += 1;
        if report.is_finite() {
            st.nonfinite_streak = 0;
        } else {
            st.nonfinite_streak += 1;
            warn!("non-finite loss at step {t} ({} in a row)", st.nonfinite_streak);
            if st.nonfinite_streak >= MAX_NONFINITE_STREAK {
                return Err(SearchError::NonFinite {
                    step: t,
                    streak: st.nonfinite_streak,
                    report,
                });
            }
        }
        Ok(report)
    }

    /// Runs until the configured number of steps, calling `observer` after
    /// each step.
    pub fn run(&mut self, mut observer: impl FnMut(&LossReport)) -> Result<(), SearchError> {
        while !self.is_done() {
            let r = self.step()?;
            observer(&r);
        }
        Ok(())
    }

    /// Runs at most `steps` more steps.
    pub fn run_for(&mut self, steps: u64, mut observer: impl FnMut(&LossReport)) -> Result<(), SearchError> {
        for _ in 0..steps {
            if self.is_done() {
                break;
            }
            let r = self.step()?;
            observer(&r);
        }
        Ok(())
    }

    pub fn finish(self) -> SearchOutcome {
        let mut policy = self.state.policy;
        policy.mode = Mode::Inference;
        SearchOutcome {
            policy,
            critic: self.state.critic,
            history: self.state.history,
        }
    }
}

/// One critic update on constant batches: minimizes
/// `mean D(fake) - mean D(real) + gp_coef·GP + ε·(CE(fake) + CE(real))`.
/// Returns the loss and the penalty before the update.
#[allow(clippy::too_many_arguments)]
fn critic_update(
    st: &mut SearchState,
    cfg: &SearchConfig,
    fake: &Tensor,
    y_fake: &[usize],
    real: &Tensor,
    y_real: &[usize],
    t: u64,
    j: u64,
) -> Result<(f64, f64), SearchError> {
    let tape = Tape::new();
    let critic = st.critic.bind(&tape, true);
    let pf = critic.forward(tape.constant(fake.clone()))?;
    let pr = critic.forward(tape.constant(real.clone()))?;
    let wasserstein = pr.scores.mean().sub(pf.scores.mean())?;
    let mix = penalty_mix(real.shape()[0], &mut stream(cfg.seed, &[purpose::PENALTY_MIX, t, j]));
    let gp = gradient_penalty(&critic, &tape, real, fake, &mix)?;
    let cls = pf.logits.cross_entropy(y_fake)?.add(pr.logits.cross_entropy(y_real)?)?;
    let loss = gp
        .scale(cfg.gp_coef)
        .sub(wasserstein)?
        .add(cls.scale(cfg.cls_coef))?;
    let value = loss.item().expect("scalar");
    if value.is_finite() {
        loss.backward()?;
        let grads = critic.grads(&tape);
        let mut flat = st.critic.flat();
        st.critic_opt.step(&mut flat, &grads);
        st.critic.set_flat(&flat);
    }
    Ok((value as f64, gp.item().expect("scalar") as f64))
}

/// Runs a full search.
pub fn run_search(
    config: SearchConfig,
    source: &DatasetBundle,
    target: Option<&DatasetBundle>,
    observer: impl FnMut(&LossReport),
) -> Result<SearchOutcome, SearchError> {
    let mut s = Searcher::new(config, source, target)?;
    s.run(observer)?;
    Ok(s.finish())
}

/// How well a policy recovered a known single-operation transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Recovery {
    pub sub_policy: usize,
    pub stage: usize,
    /// Whether the ground-truth op holds the largest mixture weight.
    pub is_argmax: bool,
    /// Mixture probability of the ground-truth op.
    pub weight: f64,
    pub probability: f32,
    pub magnitude: f32,
    pub magnitude_error: f32,
    pub success: bool,
}

pub const RECOVERY_MAGNITUDE_TOL: f32 = 0.07;
pub const RECOVERY_MIN_PROBABILITY: f32 = 0.8;

/// Inspects the stage that weights the ground-truth op most heavily.
pub fn recovery(policy: &Policy, truth: &GroundTruth) -> Option<Recovery> {
    let (op, mu_star) = (truth.op?, truth.mu?);
    let oi = policy.ops.iter().position(|&k| k == op)?;
    let mut best: Option<Recovery> = None;
    for (si, sp) in policy.sub_policies.iter().enumerate() {
        for (ki, st) in sp.stages.iter().enumerate() {
            let probs = crate::policy::categorical_probs(&st.weights, policy.eta);
            let top = probs
                .iter()
                .enumerate()
                .fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
            let p = policy.prob(si, ki, oi);
            let mu = policy.magnitude(si, ki, oi);
            let err = (mu - mu_star).abs();
            let r = Recovery {
                sub_policy: si,
                stage: ki,
                is_argmax: top == oi,
                weight: probs[oi],
                probability: p,
                magnitude: mu,
                magnitude_error: err,
                success: top == oi && p > RECOVERY_MIN_PROBABILITY && err <= RECOVERY_MAGNITUDE_TOL,
            };
            if best.map_or(true, |b| r.weight > b.weight) {
                best = Some(r);
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    SubPolicies,
    Stages,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: usize,
    pub steps: u64,
    /// Mean Wasserstein estimate over the last 10% of steps.
    pub final_wasserstein: f64,
    pub final_policy_loss: f64,
    pub recovery: Option<Recovery>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Direction of the Wasserstein estimate as the axis value grows.
    pub trend: String,
}

fn tail_mean(history: &[LossReport], f: impl Fn(&LossReport) -> f64) -> f64 {
    let n = (history.len() / 10).max(1).min(history.len());
    if n == 0 {
        return f64::NAN;
    }
    history[history.len() - n..].iter().map(f).sum::<f64>() / n as f64
}

/// Repeats the search once per value of L or K.
pub fn ablation_grid(
    base: &SearchConfig,
    axis: AblationAxis,
    values: &[usize],
    source: &DatasetBundle,
    target: Option<&DatasetBundle>,
    truth: Option<&GroundTruth>,
) -> Result<AblationReport, SearchError> {
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            AblationAxis::SubPolicies => cfg.l = v,
            AblationAxis::Stages => cfg.k = v,
        }
        let out = run_search(cfg, source, target, |_| {})?;
        rows.push(AblationRow {
            axis,
            value: v,
            steps: out.history.len() as u64,
            final_wasserstein: tail_mean(&out.history, |r| r.wasserstein_estimate),
            final_policy_loss: tail_mean(&out.history, |r| r.policy_loss),
            recovery: truth.and_then(|g| recovery(&out.policy, g)),
        });
    }
    let w: Vec<f64> = rows.iter().map(|r| r.final_wasserstein).collect();
    let trend = if w.windows(2).all(|p| p[1] <= p[0]) {
        "non-increasing"
    } else if w.windows(2).all(|p| p[1] >= p[0]) {
        "non-decreasing"
    } else {
        "mixed"
    };
    Ok(AblationReport {
        rows,
        trend: trend.to_string(),
    })
}

/// Trains a fresh critic to separate `real` from `fake` and returns its
/// final `mean D(real) - mean D(fake)` over both full sets. Larger means
/// the sets are further apart.
pub fn distance_estimate(
    real: &Tensor,
    fake: &Tensor,
    steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64, SearchError> {
    let (nr, nf) = (real.shape()[0], fake.shape()[0]);
    let bs = batch_size.min(nr).min(nf);
    if bs < 2 {
        return Err(SearchError::BatchSize(bs));
    }
    let defaults = SearchConfig::default();
    let mut net = CriticNet::init(CriticConfig::new(real.shape()[1], 1), &mut stream(seed, &[purpose::CRITIC_INIT]));
    let mut opt = Adam::new(net.flat().len(), defaults.lr, defaults.betas, defaults.adam_eps);
    let pick = |n: usize, t: u64, which: u64| {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = stream(seed, &[purpose::PAIR_BATCH, t, which]);
        idx.partial_shuffle(&mut rng, bs).0.to_vec()
    };
    for t in 0..steps as u64 {
        let r = real.select0(&pick(nr, t, 0))?;
        let f = fake.select0(&pick(nf, t, 1))?;
        let tape = Tape::new();
        let critic = net.bind(&tape, true);
        let mix = penalty_mix(bs, &mut stream(seed, &[purpose::PENALTY_MIX, t]));
        let loss = crate::objective::wgan_gp_critic_loss(&critic, &tape, &r, &f, defaults.gp_coef, &mix)?;
        if loss.loss.item().is_some_and(f32::is_finite) {
            loss.loss.backward()?;
            let mut flat = net.flat();
            opt.step(&mut flat, &critic.grads(&tape));
            net.set_flat(&flat);
        }
    }
    let tape = Tape::new();
    let critic = net.bind(&tape, false);
    let dr = critic.forward(tape.constant(real.clone()))?.scores.mean();
    let df = critic.forward(tape.constant(fake.clone()))?.scores.mean();
    Ok(dr.sub(df)?.item().expect("scalar") as f64)
}
