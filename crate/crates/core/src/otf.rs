//! On-the-fly retrieval: episodes over progressively rendered sketches,
//! rank-based rewards and PPO fine-tuning of the sketch-branch policy.

use autodiff::{Adam, Linear, Module, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};
use crate::metrics::{
    episode_metrics, kendall_tau_norm, normalize, stroke_backlash, AccSummary, EpisodeCurve, Gallery, RankList,
};
use crate::models::{gaussian_log_prob, policy_sample, GaussianPolicyHead, RasterEncoder, ValueHead};
use crate::rng;
use crate::sketch::{partial_prefix, rasterize, VectorSketch};

pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_GAMMA1: f64 = 1.0;
pub const DEFAULT_GAMMA2: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_KL_COEF: f64 = 0.01;
pub const DEFAULT_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardScheme {
    InverseRank,
    NegRank,
    InvSqrtRank,
    TopqIndicator { q: usize },
    Combined { gamma1: f64, gamma2: f64 },
}

impl Default for RewardScheme {
    fn default() -> Self {
        Self::Combined {
            gamma1: DEFAULT_GAMMA1,
            gamma2: DEFAULT_GAMMA2,
        }
    }
}

impl RewardScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Combined { gamma1, gamma2 } if gamma1 < 0.0 || gamma2 < 0.0 => {
                Err(SketchError::InvalidArgument("reward weights must be non-negative".into()))
            }
            Self::TopqIndicator { q: 0 } => Err(SketchError::InvalidArgument("top-q needs q ≥ 1".into())),
            _ => Ok(()),
        }
    }

    /// Per-step rank term of the scheme.
    pub fn local(&self, rank: usize) -> f64 {
        let r = rank as f64;
        match *self {
            Self::InverseRank => reward_local(rank),
            Self::NegRank => -r,
            Self::InvSqrtRank => 1.0 / r.sqrt(),
            Self::TopqIndicator { q } => {
                if rank <= q {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Combined { gamma1, .. } => gamma1 * reward_local(rank),
        }
    }
}

pub fn reward_local(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// `−max(0, τ(L_t, L_{t+1}) − τ(L_{t−1}, L_t))`.
pub fn reward_global(prev: &RankList, cur: &RankList, next: &RankList) -> Result<f64> {
    let before = kendall_tau_norm(prev, cur)?;
    let after = kendall_tau_norm(cur, next)?;
    Ok(reward_global_from_tau(before, after))
}

pub fn reward_global_from_tau(tau_before: f64, tau_after: f64) -> f64 {
    -(tau_after - tau_before).max(0.0)
}

pub fn combined_reward(local: f64, global: f64, gamma1: f64, gamma2: f64) -> f64 {
    gamma1 * local + gamma2 * global
}

/// Rewards for an episode's ranks and rank lists. The global term needs a
/// neighbour on both sides and is zero at the first and last step.
pub fn episode_rewards(ranks: &[usize], lists: &[RankList], scheme: &RewardScheme) -> Result<Vec<f64>> {
    if ranks.len() != lists.len() {
        return Err(SketchError::InvalidArgument("ranks and rank lists differ in length".into()));
    }
    let n = ranks.len();
    (0..n)
        .map(|t| {
            let local = scheme.local(ranks[t]);
            match *scheme {
                RewardScheme::Combined { gamma2, .. } if gamma2 != 0.0 && t > 0 && t + 1 < n && lists[t].len() >= 2 => {
                    Ok(local + gamma2 * reward_global(&lists[t - 1], &lists[t], &lists[t + 1])?)
                }
                _ => Ok(local),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpoVariant {
    VanillaPg,
    ActorOnlyClip,
    ActorCriticClip,
    KlPenalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub variant: PpoVariant,
    pub epsilon: f64,
    pub kl_coef: f64,
    /// Value-loss weight for the actor-critic variant.
    pub c1: f64,
    /// Gradient steps per collected batch before the old policy is refreshed.
    pub iters: usize,
    pub lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            variant: PpoVariant::ActorOnlyClip,
            epsilon: DEFAULT_EPSILON,
            kl_coef: DEFAULT_KL_COEF,
            c1: 0.5,
            iters: 4,
            lr: 1e-3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(SketchError::InvalidArgument("ppo epsilon must lie in (0, 1)".into()));
        }
        if self.kl_coef < 0.0 || self.c1 < 0.0 || self.lr <= 0.0 {
            return Err(SketchError::InvalidArgument("ppo coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    /// Frozen encoder state `s′_t` of the partial render.
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub old_log_prob: f64,
    pub rank: usize,
    pub rank_list: RankList,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub instance_id: u64,
    pub steps: Vec<TraceStep>,
    /// Behaviour-policy mean at each step and its `log Σ`.
    pub old_mu: Vec<Vec<f64>>,
    pub old_log_sigma: Vec<f64>,
}

impl EpisodeTrace {
    pub fn ranks(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.rank).collect()
    }

    pub fn curve(&self, m: usize) -> EpisodeCurve {
        EpisodeCurve::from_ranks(&self.ranks(), m)
    }

    pub fn assign_rewards(&mut self, scheme: &RewardScheme) -> Result<()> {
        let lists: Vec<RankList> = self.steps.iter().map(|s| s.rank_list.clone()).collect();
        let r = episode_rewards(&self.ranks(), &lists, scheme)?;
        for (s, r) in self.steps.iter_mut().zip(r) {
            s.reward = r;
        }
        Ok(())
    }
}

/// Frozen-encoder states of the `T` partial renders of a sketch.
pub fn episode_states(encoder: &RasterEncoder, sketch: &VectorSketch, steps: usize, line_width: usize) -> Result<Vec<Vec<f64>>> {
    if sketch.is_empty() {
        return Err(SketchError::EmptySketch);
    }
    if steps == 0 {
        return Err(SketchError::InvalidArgument("episode needs T ≥ 1".into()));
    }
    let n = encoder.config().canvas;
    (1..=steps)
        .map(|t| {
            let prefix = partial_prefix(sketch, t, steps)?;
            encoder.state_plain(&rasterize(&prefix, n, n, line_width)?)
        })
        .collect()
}

/// Retrieval query for a state under a plain head: `normalize(head(s′))`.
pub fn head_query(head: &Linear, state: &[f64]) -> Vec<f64> {
    normalize(head.apply(&Tensor::row(state)).data())
}

/// Plays one episode over precomputed states.
pub fn rollout_states<R: Rng + ?Sized>(
    instance_id: u64,
    states: &[Vec<f64>],
    policy: &GaussianPolicyHead,
    gallery: &Gallery,
    mode: ActionMode,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    let sigma = policy.sigma();
    let mut steps = Vec::with_capacity(states.len());
    let mut old_mu = Vec::with_capacity(states.len());
    for s in states {
        let mu = policy.mean_plain(s);
        let (action, lp) = match mode {
            ActionMode::Sample => policy_sample(&mu, &sigma, rng),
            ActionMode::Mean => {
                let lp = gaussian_log_prob(&mu, &mu, &sigma);
                (mu.clone(), lp)
            }
        };
        let (rank, rank_list) = gallery.rank_of(&normalize(&action), instance_id)?;
        steps.push(TraceStep {
            state: s.clone(),
            action,
            log_prob: lp,
            old_log_prob: lp,
            rank,
            rank_list,
            reward: 0.0,
        });
        old_mu.push(mu);
    }
    Ok(EpisodeTrace {
        instance_id,
        steps,
        old_mu,
        old_log_sigma: policy.log_sigma.value.data().to_vec(),
    })
}

/// Renders `sketch` at `T` steps and plays one episode.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    sketch: &VectorSketch,
    instance_id: u64,
    encoder: &RasterEncoder,
    policy: &GaussianPolicyHead,
    gallery: &Gallery,
    steps: usize,
    line_width: usize,
    mode: ActionMode,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    let states = episode_states(encoder, sketch, steps, line_width)?;
    rollout_states(instance_id, &states, policy, gallery, mode, rng)
}

/// `min(m·A, clip(m, 1−ε, 1+ε)·A)` elementwise.
pub fn clipped_surrogate<'t>(ratio: Var<'t>, advantage: Var<'t>, epsilon: f64) -> Var<'t> {
    let unclipped = ratio.mul(advantage);
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon).mul(advantage);
    unclipped.minimum(clipped)
}

/// `KL(N(μ_old, σ_old²) ‖ N(μ, σ²))` per row, diagonal.
fn gaussian_kl<'t>(tape: &'t Tape, mu: Var<'t>, log_sigma: Var<'t>, old_mu: &Tensor, old_log_sigma: &Tensor) -> Var<'t> {
    let om = tape.constant(old_mu.clone());
    let ols = tape.constant(old_log_sigma.clone());
    let var = log_sigma.scale(2.0).exp();
    let num = ols.scale(2.0).exp().add(om.sub(mu).square());
    log_sigma
        .sub(ols)
        .add(num.div(var).scale(0.5))
        .add_scalar(-0.5)
        .sum_cols()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
}

/// Surrogate loss over a batch of traces.
pub fn ppo_loss<'t>(
    tape: &'t Tape,
    policy: &GaussianPolicyHead,
    value: Option<&ValueHead>,
    traces: &[EpisodeTrace],
    cfg: &PpoConfig,
) -> Result<(Var<'t>, PpoDiagnostics)> {
    let rows: Vec<Vec<f64>> = traces.iter().flat_map(|t| t.steps.iter().map(|s| s.state.clone())).collect();
    if rows.is_empty() {
        return Err(SketchError::InvalidArgument("ppo update over empty traces".into()));
    }
    let collect = |f: &dyn Fn(&TraceStep) -> f64| -> Vec<f64> {
        traces.iter().flat_map(|t| t.steps.iter().map(f)).collect::<Vec<f64>>()
    };
    let states = tape.constant(Tensor::from_rows(&rows)?);
    let actions = Tensor::from_rows(
        &traces
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.action.clone()))
            .collect::<Vec<_>>(),
    )?;
    let rewards = Tensor::column(&collect(&|s| s.reward));
    let old_lp = Tensor::column(&collect(&|s| s.old_log_prob));
    let mean = policy.mean(tape, states);
    let lp = policy.log_prob(tape, mean, &actions);
    let ratio = lp.sub(tape.constant(old_lp)).exp();
    let r = tape.constant(rewards.clone());
    let mut diag = PpoDiagnostics {
        mean_ratio: ratio.value().sum() / rows.len() as f64,
        clip_fraction: ratio
            .value()
            .data()
            .iter()
            .filter(|m| (**m - 1.0).abs() > cfg.epsilon)
            .count() as f64
            / rows.len() as f64,
        ..Default::default()
    };
    let loss = match cfg.variant {
        PpoVariant::VanillaPg => lp.mul(r).mean().neg(),
        PpoVariant::ActorOnlyClip => clipped_surrogate(ratio, r, cfg.epsilon).mean().neg(),
        PpoVariant::ActorCriticClip => {
            let value = value.ok_or_else(|| SketchError::InvalidArgument("actor-critic needs a value head".into()))?;
            let v = value.lin.forward(tape, states);
            let adv = rewards.zip_map(&v.value(), |r, v| r - v);
            let actor = clipped_surrogate(ratio, tape.constant(adv), cfg.epsilon).mean().neg();
            let vloss = v.sub(r).square().mean();
            diag.value_loss = vloss.item();
            actor.add(vloss.scale(cfg.c1))
        }
        PpoVariant::KlPenalty => {
            let old_mu = Tensor::from_rows(&traces.iter().flat_map(|t| t.old_mu.clone()).collect::<Vec<_>>())?;
            let ols = Tensor::row(&traces[0].old_log_sigma);
            let kl = gaussian_kl(tape, mean, tape.param(&policy.log_sigma), &old_mu, &ols);
            ratio.mul(r).sub(kl.scale(cfg.kl_coef)).mean().neg()
        }
    };
    diag.loss = loss.item();
    Ok((loss, diag))
}

/// Optimiser state for the policy (and the optional critic).
pub struct PpoOptimizer {
    pub policy: Adam,
    pub value: Adam,
}

impl PpoOptimizer {
    pub fn new(lr: f64) -> Self {
        Self {
            policy: Adam::new(lr),
            value: Adam::new(lr),
        }
    }
}

/// Runs `cfg.iters` gradient steps on one batch. Only the policy mean map
/// and `Σ` (and the critic, if used) receive gradients.
pub fn ppo_update(
    policy: &mut GaussianPolicyHead,
    mut value: Option<&mut ValueHead>,
    opt: &mut PpoOptimizer,
    traces: &[EpisodeTrace],
    cfg: &PpoConfig,
) -> Result<PpoDiagnostics> {
    let mut last = PpoDiagnostics::default();
    for _ in 0..cfg.iters.max(1) {
        let tape = Tape::new();
        let (loss, diag) = ppo_loss(&tape, policy, value.as_deref(), traces, cfg)?;
        let grads = tape.backward(loss)?;
        policy.zero_grad();
        policy.accumulate(&grads);
        opt.policy.step_module(policy)?;
        if let Some(v) = value.as_deref_mut() {
            if cfg.variant == PpoVariant::ActorCriticClip {
                v.zero_grad();
                v.accumulate(&grads);
                opt.value.step_module(v)?;
            }
        }
        last = diag;
    }
    Ok(last)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtfConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub reward: RewardScheme,
    pub ppo: PpoConfig,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OtfConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            reward: RewardScheme::default(),
            ppo: PpoConfig::default(),
            batch: DEFAULT_BATCH,
            epochs: 30,
            seed: 0,
        }
    }
}

impl OtfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(SketchError::InvalidArgument("T and batch must be at least 1".into()));
        }
        self.reward.validate()?;
        self.ppo.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OtfEval {
    pub m_a: f64,
    pub m_b: f64,
    pub acc: AccSummary,
    pub backlash: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OtfEpochLog {
    pub epoch: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub mean_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct OtfOutcome {
    pub policy: GaussianPolicyHead,
    pub value: ValueHead,
    pub before: OtfEval,
    pub after: OtfEval,
    pub log: Vec<OtfEpochLog>,
}

/// One query sketch with its precomputed episode states.
#[derive(Clone, Debug)]
pub struct OtfQuery {
    pub instance_id: u64,
    pub states: Vec<Vec<f64>>,
}

pub fn prepare_queries(
    encoder: &RasterEncoder,
    sketches: &[(u64, &VectorSketch)],
    steps: usize,
    line_width: usize,
) -> Result<Vec<OtfQuery>> {
    sketches
        .par_iter()
        .map(|(id, s)| {
            Ok(OtfQuery {
                instance_id: *id,
                states: episode_states(encoder, s, steps, line_width)?,
            })
        })
        .collect()
}

/// Deterministic evaluation with the query `normalize(head(s′_t))`.
pub fn evaluate_head(head: &Linear, queries: &[OtfQuery], gallery: &Gallery) -> Result<OtfEval> {
    if queries.is_empty() {
        return Err(SketchError::InvalidArgument("evaluation over no queries".into()));
    }
    let per: Vec<(f64, f64, usize, f64)> = queries
        .par_iter()
        .map(|q| {
            let ranks: Vec<usize> = q
                .states
                .iter()
                .map(|s| Ok(gallery.rank_of(&head_query(head, s), q.instance_id)?.0))
                .collect::<Result<_>>()?;
            let curve = EpisodeCurve::from_ranks(&ranks, gallery.len());
            let (a, b) = episode_metrics(&curve)?;
            let bl = if ranks.len() >= 2 { stroke_backlash(&curve.unit_rp())? } else { 0.0 };
            Ok((a, b, *ranks.last().expect("T ≥ 1"), bl))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let finals: Vec<usize> = per.iter().map(|p| p.2).collect();
    Ok(OtfEval {
        m_a: per.iter().map(|p| p.0).sum::<f64>() / n,
        m_b: per.iter().map(|p| p.1).sum::<f64>() / n,
        acc: AccSummary::from_ranks(&finals)?,
        backlash: per.iter().map(|p| p.3).sum::<f64>() / n,
    })
}

/// Fine-tunes a Gaussian policy initialised from the frozen sketch head.
pub fn train_otf(encoder: &RasterEncoder, queries: &[OtfQuery], gallery: &Gallery, cfg: &OtfConfig) -> Result<OtfOutcome> {
    cfg.validate()?;
    let mut policy = GaussianPolicyHead::from_projection("otf.policy", &encoder.head);
    let mut init_rng = rng::stream(cfg.seed, &[30]);
    let mut value = ValueHead::new("otf.value", encoder.config().channels, &mut init_rng);
    let before = evaluate_head(&policy.mu, queries, gallery)?;
    let mut opt = PpoOptimizer::new(cfg.ppo.lr);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, &[31, epoch as u64]);
        order.shuffle(&mut shuffle);
        let (mut rsum, mut rcount, mut lsum, mut batches) = (0.0, 0usize, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let traces: Vec<EpisodeTrace> = chunk
                .par_iter()
                .map(|&i| {
                    let q = &queries[i];
                    let mut r = rng::stream(cfg.seed, &[32, epoch as u64, b as u64, i as u64]);
                    let mut tr = rollout_states(q.instance_id, &q.states, &policy, gallery, ActionMode::Sample, &mut r)?;
                    tr.assign_rewards(&cfg.reward)?;
                    Ok(tr)
                })
                .collect::<Result<_>>()?;
            for t in &traces {
                rsum += t.steps.iter().map(|s| s.reward).sum::<f64>();
                rcount += t.steps.len();
            }
            let diag = ppo_update(&mut policy, Some(&mut value), &mut opt, &traces, &cfg.ppo)?;
            lsum += diag.loss;
            batches += 1;
        }
        let entry = OtfEpochLog {
            epoch,
            mean_reward: rsum / rcount.max(1) as f64,
            loss: lsum / batches.max(1) as f64,
            mean_sigma: policy.sigma().iter().sum::<f64>() / policy.dim() as f64,
        };
        log::debug!("otf epoch {epoch}: {entry:?}");
        log.push(entry);
    }
    let after = evaluate_head(&policy.mu, queries, gallery)?;
    Ok(OtfOutcome {
        policy,
        value,
        before,
        after,
        log,
    })
}
