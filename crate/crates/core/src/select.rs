//! Stroke-subset selection: a per-stroke select/ignore policy trained with
//! actor-critic PPO against a frozen retrieval model.

use std::collections::VecDeque;

use autodiff::{concat_rows, Adam, Module, Tape, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};
use crate::metrics::{triplet_loss, AccSummary, Gallery};
use crate::models::{RasterEncoderConfig, StrokeHierEncoder};
use crate::otf::clipped_surrogate;
use crate::retrieval::{pairs_from_instances, train_triplet, RetrievalModel, TrainPair, TripletConfig};
use crate::rng;
use crate::sketch::{SyntheticInstance, VectorSketch};

pub const MAX_BRUTE_FORCE_STROKES: usize = 16;
const MAX_RESAMPLES: usize = 10;

/// Per-stroke select flags.
pub type SubsetMask = Vec<bool>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Sample,
    Argmax,
}

/// Draws a mask from per-stroke select probabilities. An all-ignore draw
/// is redrawn up to ten times, then the most probable stroke is forced on.
pub fn sample_mask<R: Rng + ?Sized>(probs: &[f64], mode: SelectMode, rng: &mut R) -> SubsetMask {
    let mut mask: SubsetMask = match mode {
        SelectMode::Argmax => probs.iter().map(|&p| p >= 0.5).collect(),
        SelectMode::Sample => {
            let mut m = vec![false; probs.len()];
            for _ in 0..=MAX_RESAMPLES {
                m = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
                if m.iter().any(|&b| b) {
                    break;
                }
            }
            m
        }
    };
    if !mask.iter().any(|&b| b) {
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i);
        mask[best] = true;
    }
    mask
}

/// Log-probability of each stroke's action under `probs`.
pub fn mask_log_probs(probs: &[f64], mask: &[bool]) -> Vec<f64> {
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m { p.ln() } else { (1.0 - p).ln() })
        .collect()
}

pub fn select_subset<R: Rng + ?Sized>(
    sketch: &VectorSketch,
    selector: &StrokeHierEncoder,
    mode: SelectMode,
    rng: &mut R,
) -> Result<(SubsetMask, Vec<f64>)> {
    let probs = selector.select_probs(sketch)?;
    let mask = sample_mask(&probs, mode, rng);
    let lp = mask_log_probs(&probs, &mask);
    Ok((mask, lp))
}

/// `n` sampled masks; duplicates allowed.
pub fn augment_subsets<R: Rng + ?Sized>(
    sketch: &VectorSketch,
    selector: &StrokeHierEncoder,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SubsetMask>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let probs = selector.select_probs(sketch)?;
    Ok((0..n).map(|_| sample_mask(&probs, SelectMode::Sample, rng)).collect())
}

/// Predicted retrievability `V(S)` of a (partial) sketch.
pub fn retrievability_score(sketch: &VectorSketch, selector: &StrokeHierEncoder) -> Result<f64> {
    selector.value_plain(sketch)
}

/// Frozen retrieval model and its precomputed photo gallery.
pub struct RewardContext<'a> {
    pub model: &'a RetrievalModel,
    pub gallery: &'a Gallery,
}

impl RewardContext<'_> {
    /// Rank and sketch embedding of a masked sketch.
    pub fn rank(&self, sketch: &VectorSketch, mask: &[bool], instance_id: u64) -> Result<(usize, Vec<f64>)> {
        let q = self.model.embed_sketch(&sketch.select(mask)?)?;
        let (rank, _) = self.gallery.rank_of(&q, instance_id)?;
        Ok((rank, q))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub omega1: f64,
    pub omega2: f64,
    pub margin: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 1.0,
            margin: crate::retrieval::DEFAULT_MARGIN,
        }
    }
}

/// `ω1/rank − ω2·L_triplet` for the masked sketch, the paired photo as
/// positive and the gallery item `negative_id` as negative.
pub fn subset_reward(
    mask: &[bool],
    sketch: &VectorSketch,
    instance_id: u64,
    negative_id: u64,
    ctx: &RewardContext<'_>,
    w: &RewardWeights,
) -> Result<f64> {
    let (rank, q) = ctx.rank(sketch, mask, instance_id)?;
    let p = ctx.gallery.embedding(ctx.gallery.index_of(instance_id)?);
    let n = ctx.gallery.embedding(ctx.gallery.index_of(negative_id)?);
    Ok(w.omega1 / rank as f64 - w.omega2 * triplet_loss(&q, p, n, w.margin))
}

/// Exhaustive search over all non-empty stroke subsets. Returns the best
/// rank and the lexicographically smallest mask (false < true) reaching it.
pub fn brute_force_upper_limit(sketch: &VectorSketch, instance_id: u64, ctx: &RewardContext<'_>) -> Result<(usize, SubsetMask)> {
    let k = sketch.num_strokes();
    if k == 0 {
        return Err(SketchError::EmptySketch);
    }
    if k > MAX_BRUTE_FORCE_STROKES {
        return Err(SketchError::InvalidArgument(format!(
            "{k} strokes give 2^{k} subsets; at most {MAX_BRUTE_FORCE_STROKES} are enumerated, sample masks with the selector instead"
        )));
    }
    let masks: Vec<SubsetMask> = (1u32..(1 << k))
        .map(|bits| (0..k).map(|i| bits & (1 << (k - 1 - i)) != 0).collect())
        .collect();
    let ranks: Vec<usize> = masks
        .par_iter()
        .map(|m| Ok(ctx.rank(sketch, m, instance_id)?.0))
        .collect::<Result<_>>()?;
    let best = masks
        .into_iter()
        .zip(ranks)
        .min_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)))
        .expect("k ≥ 1");
    Ok((best.1, best.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    /// Independent re-selections per sample, each from the full sketch.
    #[serde(rename = "T")]
    pub steps: usize,
    pub omega1: f64,
    pub omega2: f64,
    pub epsilon: f64,
    pub c1: f64,
    pub c2: f64,
    /// Iterations between old-policy refreshes.
    pub refresh: usize,
    pub buffer: usize,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub margin: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            omega1: 1.0,
            omega2: 1.0,
            epsilon: 0.2,
            c1: 0.5,
            c2: 0.01,
            refresh: 20,
            buffer: 512,
            batch: 16,
            iterations: 600,
            lr: 2e-3,
            margin: crate::retrieval::DEFAULT_MARGIN,
            hidden: 64,
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            omega1: self.omega1,
            omega2: self.omega2,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.omega1, self.omega2, self.c1, self.c2, self.epsilon].iter().any(|&v| v < 0.0) {
            return Err(SketchError::InvalidArgument("selector coefficients must be non-negative".into()));
        }
        if self.steps == 0 || self.batch == 0 || self.refresh == 0 || self.buffer == 0 {
            return Err(SketchError::InvalidArgument("selector counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training sample: `T` masks drawn by the behaviour policy with their
/// per-stroke log-probabilities and rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorTrace {
    pub sample: usize,
    pub masks: Vec<SubsetMask>,
    pub old_log_probs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorDiagnostics {
    pub loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Bernoulli entropy per stroke from select probabilities (column).
fn stroke_entropy<'t>(probs: Var<'t>) -> Var<'t> {
    let logp = probs.clamp(1e-12, 1.0).log();
    probs.mul(logp).sum_cols().neg()
}

/// Actor-critic PPO loss over traces: for every draw, the clipped surrogate
/// averaged over strokes with advantage `R − V(S)`, plus `c1 (V(S) − R)²`,
/// minus `c2` times the mean stroke entropy; summed over draws and averaged
/// over traces.
pub fn ac_ppo_loss<'t>(
    tape: &'t Tape,
    selector: &StrokeHierEncoder,
    sketches: &[&VectorSketch],
    traces: &[SelectorTrace],
    cfg: &SelectorConfig,
) -> Result<(Var<'t>, SelectorDiagnostics)> {
    if traces.is_empty() {
        return Err(SketchError::InvalidArgument("selector update over no traces".into()));
    }
    let mut terms = Vec::with_capacity(traces.len());
    let mut diag = SelectorDiagnostics::default();
    for tr in traces {
        let sketch = sketches[tr.sample];
        let enc = selector.encode(tape, sketch)?;
        let k = sketch.num_strokes();
        let logp = enc.logits.log_softmax();
        let v = selector.value(tape, &enc);
        let entropy = stroke_entropy(enc.probs).mean();
        diag.entropy += entropy.item();
        let mut draws = Vec::with_capacity(tr.masks.len());
        for ((mask, old), &r) in tr.masks.iter().zip(&tr.old_log_probs).zip(&tr.rewards) {
            if mask.len() != k || old.len() != k {
                return Err(SketchError::InvalidArgument("mask length differs from stroke count".into()));
            }
            let idx: Vec<usize> = mask.iter().map(|&m| if m { 0 } else { 1 }).collect();
            let lp = logp.gather(&idx);
            let ratio = lp.sub(tape.constant(Tensor::column(old))).exp();
            let adv = r - v.item();
            let actor = clipped_surrogate(ratio, tape.constant(Tensor::full(k, 1, adv)), cfg.epsilon).mean();
            let vloss = v.add_scalar(-r).square();
            diag.value_loss += vloss.item();
            draws.push(actor.neg().add(vloss.scale(cfg.c1)).sub(entropy.scale(cfg.c2)));
        }
        terms.push(concat_rows(&draws).sum());
    }
    let n = traces.len() as f64;
    let loss = concat_rows(&terms).mean();
    diag.loss = loss.item();
    diag.entropy /= n;
    diag.value_loss /= n;
    Ok((loss, diag))
}

pub fn ac_ppo_update(
    selector: &mut StrokeHierEncoder,
    adam: &mut Adam,
    sketches: &[&VectorSketch],
    traces: &[SelectorTrace],
    cfg: &SelectorConfig,
) -> Result<SelectorDiagnostics> {
    let tape = Tape::new();
    let (loss, diag) = ac_ppo_loss(&tape, selector, sketches, traces, cfg)?;
    let grads = tape.backward(loss)?;
    selector.zero_grad();
    selector.accumulate(&grads);
    autodiff::clip_grad_norm(selector.params_mut(), 5.0);
    adam.step_module(selector)?;
    Ok(diag)
}

/// A query sketch for selector training.
#[derive(Clone, Debug)]
pub struct SelectorSample<'a> {
    pub instance_id: u64,
    pub sketch: &'a VectorSketch,
    /// Index of the reward context scoring this sample.
    pub context: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorLog {
    pub iteration: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub entropy: f64,
}

/// Collects traces from the behaviour policy `old` for the given samples.
pub fn collect_traces(
    old: &StrokeHierEncoder,
    samples: &[SelectorSample<'_>],
    picks: &[usize],
    contexts: &[RewardContext<'_>],
    cfg: &SelectorConfig,
    tags: &[u64],
) -> Result<Vec<SelectorTrace>> {
    let w = cfg.weights();
    picks
        .par_iter()
        .map(|&s| {
            let mut t = tags.to_vec();
            t.push(s as u64);
            let mut r = rng::stream(cfg.seed, &t);
            let sample = &samples[s];
            let ctx = contexts.get(sample.context).ok_or_else(|| {
                SketchError::InvalidArgument(format!("sample refers to missing reward context {}", sample.context))
            })?;
            let probs = old.select_probs(sample.sketch)?;
            let mut tr = SelectorTrace {
                sample: s,
                masks: Vec::new(),
                old_log_probs: Vec::new(),
                rewards: Vec::new(),
            };
            for _ in 0..cfg.steps {
                let mask = sample_mask(&probs, SelectMode::Sample, &mut r);
                let others: Vec<u64> = ctx.gallery.ids().iter().copied().filter(|&id| id != sample.instance_id).collect();
                let neg = others.choose(&mut r).copied().unwrap_or(sample.instance_id);
                tr.rewards.push(subset_reward(&mask, sample.sketch, sample.instance_id, neg, ctx, &w)?);
                tr.old_log_probs.push(mask_log_probs(&probs, &mask));
                tr.masks.push(mask);
            }
            Ok(tr)
        })
        .collect()
}

/// Trains a selector against frozen retrieval contexts.
pub fn train_selector(
    selector: &mut StrokeHierEncoder,
    samples: &[SelectorSample<'_>],
    contexts: &[RewardContext<'_>],
    cfg: &SelectorConfig,
) -> Result<Vec<SelectorLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SketchError::InvalidArgument("selector training needs samples".into()));
    }
    let sketches: Vec<&VectorSketch> = samples.iter().map(|s| s.sketch).collect();
    let mut adam = Adam::new(cfg.lr);
    let mut old = selector.clone();
    let mut buffer: VecDeque<SelectorTrace> = VecDeque::with_capacity(cfg.buffer);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut shuffle = rng::stream(cfg.seed, &[40]);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if it > 0 && it % cfg.refresh == 0 {
            old = selector.clone();
        }
        let mut picks = Vec::with_capacity(cfg.batch);
        while picks.len() < cfg.batch.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let fresh = collect_traces(&old, samples, &picks, contexts, cfg, &[41, it as u64])?;
        let mean_reward = fresh.iter().flat_map(|t| t.rewards.iter()).sum::<f64>() / (fresh.len() * cfg.steps) as f64;
        for t in fresh {
            if buffer.len() == cfg.buffer {
                buffer.pop_front();
            }
            buffer.push_back(t);
        }
        let batch: Vec<SelectorTrace> = buffer
            .iter()
            .collect::<Vec<_>>()
            .choose_multiple(&mut shuffle, cfg.batch)
            .map(|t| (*t).clone())
            .collect();
        let diag = ac_ppo_update(selector, &mut adam, &sketches, &batch, cfg)?;
        log.push(SelectorLog {
            iteration: it,
            mean_reward,
            loss: diag.loss,
            entropy: diag.entropy,
        });
        if it % 10 == 0 {
            log::debug!("selector it {it}: reward {mean_reward:.4} loss {:.4}", diag.loss);
        }
    }
    Ok(log)
}

/// Applies the selector's argmax mask.
pub fn clean_sketch(sketch: &VectorSketch, selector: &StrokeHierEncoder) -> Result<VectorSketch> {
    let mut unused = rng::stream(0, &[]);
    let (mask, _) = select_subset(sketch, selector, SelectMode::Argmax, &mut unused)?;
    sketch.select(&mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlternatingConfig {
    pub rounds: usize,
    pub encoder: RasterEncoderConfig,
    pub triplet: TripletConfig,
    pub selector: SelectorConfig,
    pub seed: u64,
}

impl Default for AlternatingConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            encoder: RasterEncoderConfig::default(),
            triplet: TripletConfig::default(),
            selector: SelectorConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub triplet_loss: f64,
    pub selector_reward: f64,
    /// Acc@1 of selector-cleaned training sketches after the round.
    pub train_acc1: f64,
    /// Acc@1 of selector-cleaned evaluation sketches, when an evaluation
    /// split is supplied.
    pub eval_acc1: Option<f64>,
}

pub struct AlternatingOutcome {
    pub model: RetrievalModel,
    pub selector: StrokeHierEncoder,
    pub rounds: Vec<RoundLog>,
}

/// Ranks of selector-cleaned query sketches.
pub fn cleaned_ranks(
    model: &RetrievalModel,
    selector: &StrokeHierEncoder,
    instances: &[SyntheticInstance],
    gallery: &Gallery,
) -> Result<Vec<usize>> {
    let cleaned: Vec<VectorSketch> = instances
        .par_iter()
        .map(|i| clean_sketch(&i.sketch, selector))
        .collect::<Result<_>>()?;
    let q: Vec<(u64, &VectorSketch)> = instances.iter().zip(&cleaned).map(|(i, s)| (i.instance_id, s)).collect();
    model.sketch_ranks(&q, gallery)
}

fn cleaned_pairs(instances: &[SyntheticInstance], selector: Option<&StrokeHierEncoder>, line_width: usize) -> Result<Vec<TrainPair>> {
    match selector {
        None => pairs_from_instances(instances, line_width),
        Some(sel) => instances
            .par_iter()
            .map(|i| TrainPair::new(i.instance_id, i.photo.clone(), &clean_sketch(&i.sketch, sel)?, line_width))
            .collect(),
    }
}

/// Alternates triplet training on selector-cleaned sketches with selector
/// training against frozen retrieval models. The first round trains on the
/// raw sketches.
///
/// Selector rewards are cross-fitted: the training split is halved by
/// instance id parity, a fold model is trained on each half, and each
/// half's sketches are rewarded by the model that never saw them. A model
/// that memorised a noisy sketch ranks it well regardless of the subset,
/// which leaves nothing for the selector to learn.
pub fn alternating_clean_train(
    train: &[SyntheticInstance],
    eval: Option<&[SyntheticInstance]>,
    cfg: &AlternatingConfig,
) -> Result<AlternatingOutcome> {
    if cfg.rounds == 0 {
        return Err(SketchError::InvalidArgument("alternating training needs rounds ≥ 1".into()));
    }
    let (fold_a, fold_b): (Vec<SyntheticInstance>, Vec<SyntheticInstance>) =
        train.iter().cloned().partition(|i| i.instance_id % 2 == 0);
    if fold_a.len() < 2 || fold_b.len() < 2 {
        return Err(SketchError::InvalidArgument("cross-fitting needs at least two instances per fold".into()));
    }
    let mut init = rng::stream(cfg.seed, &[42]);
    let mut model = RetrievalModel::new(cfg.encoder, &mut init);
    let mut selector = StrokeHierEncoder::new("selector", cfg.selector.hidden, &mut init);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut current: Option<StrokeHierEncoder> = None;
    for round in 0..cfg.rounds {
        let tcfg = |tag: u64| TripletConfig {
            seed: rng::derive(cfg.triplet.seed, &[round as u64, tag]),
            ..cfg.triplet.clone()
        };
        let pairs = cleaned_pairs(train, current.as_ref(), model.line_width)?;
        let report = train_triplet(&mut model, &pairs, &tcfg(0))?;
        let mut fold_models = Vec::with_capacity(2);
        for (tag, fold) in [(1u64, &fold_a), (2, &fold_b)] {
            let mut r = rng::stream(cfg.seed, &[43, round as u64, tag]);
            let mut m = RetrievalModel::new(cfg.encoder, &mut r);
            let pairs = cleaned_pairs(fold, current.as_ref(), m.line_width)?;
            train_triplet(&mut m, &pairs, &tcfg(tag))?;
            fold_models.push(m);
        }
        // Fold A is scored by the model trained on B and vice versa.
        let galleries = [fold_models[1].gallery_of(&fold_a)?, fold_models[0].gallery_of(&fold_b)?];
        let contexts = [
            RewardContext {
                model: &fold_models[1],
                gallery: &galleries[0],
            },
            RewardContext {
                model: &fold_models[0],
                gallery: &galleries[1],
            },
        ];
        let samples: Vec<SelectorSample<'_>> = fold_a
            .iter()
            .map(|i| (i, 0))
            .chain(fold_b.iter().map(|i| (i, 1)))
            .map(|(i, context)| SelectorSample {
                instance_id: i.instance_id,
                sketch: &i.sketch,
                context,
            })
            .collect();
        let scfg = SelectorConfig {
            seed: rng::derive(cfg.selector.seed, &[round as u64]),
            ..cfg.selector.clone()
        };
        let slog = train_selector(&mut selector, &samples, &contexts, &scfg)?;
        let tail = slog.len().saturating_sub(10);
        let selector_reward = slog[tail..].iter().map(|l| l.mean_reward).sum::<f64>() / (slog.len() - tail).max(1) as f64;
        let gallery = model.gallery_of(train)?;
        let train_acc1 = AccSummary::from_ranks(&cleaned_ranks(&model, &selector, train, &gallery)?)?.acc1;
        let eval_acc1 = match eval {
            Some(ev) => {
                let g = model.gallery_of(ev)?;
                Some(AccSummary::from_ranks(&cleaned_ranks(&model, &selector, ev, &g)?)?.acc1)
            }
            None => None,
        };
        let entry = RoundLog {
            round,
            triplet_loss: report.final_loss().unwrap_or(0.0),
            selector_reward,
            train_acc1,
            eval_acc1,
        };
        log::info!("alternating round {round}: {entry:?}");
        rounds.push(entry);
        current = Some(selector.clone());
    }
    Ok(AlternatingOutcome { model, selector, rounds })
}
