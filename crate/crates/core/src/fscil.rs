//! Sketch-supported few-shot class-incremental learning: a backbone trained
//! with cross-domain gradient consensus, prototype weights for novel
//! classes refined by graph attention, and episodic evaluation.

use autodiff::{concat_rows, Adam, Module, Tape, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};
use crate::models::{CosineClassifier, GatLayer, RasterEncoder, RasterEncoderConfig};
use crate::rng;
use crate::sketch::{gen_synthetic_dataset, rasterize, RasterCanvas, SynthConfig, SyntheticInstance};

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Keeps `g_p + g_s` where the two components share a sign and zeroes the
/// rest. Zero has no sign, so it conflicts with any nonzero component.
pub fn gradient_consensus(photo: &Tensor, sketch: &Tensor) -> Result<Tensor> {
    if photo.shape() != sketch.shape() {
        return Err(SketchError::DimensionMismatch {
            expected: photo.shape(),
            got: sketch.shape(),
        });
    }
    Ok(photo.zip_map(sketch, |p, s| if sign(p) == sign(s) { p + s } else { 0.0 }))
}

fn grads_of<M: Module>(m: &M) -> Vec<Tensor> {
    m.params().iter().map(|p| p.grad.clone()).collect()
}

/// Replaces each parameter gradient of `m` by the consensus of the two
/// snapshots.
fn set_consensus<M: Module>(m: &mut M, photo: &[Tensor], sketch: &[Tensor]) -> Result<()> {
    for ((p, gp), gs) in m.params_mut().into_iter().zip(photo).zip(sketch) {
        p.grad = gradient_consensus(gp, gs)?;
    }
    Ok(())
}

fn normalize_rows(w: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..w.rows()).map(|r| crate::metrics::normalize(w.row_slice(r))).collect();
    Tensor::from_rows(&rows).expect("same widths")
}

/// Row-normalised mean feature of each class's support set.
pub fn prototypes_from_features(support: &[Vec<Vec<f64>>], k: usize) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(support.len());
    for (c, feats) in support.iter().enumerate() {
        if feats.is_empty() {
            return Err(SketchError::InvalidArgument(format!("class {c} has an empty support set")));
        }
        if feats.len() != k {
            return Err(SketchError::InvalidArgument(format!(
                "class {c} has {} support exemplars, expected {k}",
                feats.len()
            )));
        }
        let d = feats[0].len();
        let mut mean = vec![0.0; d];
        for f in feats {
            if f.len() != d {
                return Err(SketchError::DimensionMismatch {
                    expected: [1, d],
                    got: [1, f.len()],
                });
            }
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / k as f64;
            }
        }
        if mean.iter().all(|&v| v == 0.0) {
            return Err(SketchError::InvalidArgument(format!("class {c} prototype is zero")));
        }
        rows.push(crate::metrics::normalize(&mean));
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Prototypes of support sketches (as rasters) under `encoder`.
pub fn novel_prototypes(support: &[Vec<RasterCanvas>], k: usize, encoder: &RasterEncoder) -> Result<Tensor> {
    let feats: Vec<Vec<Vec<f64>>> = support
        .iter()
        .map(|class| class.iter().map(|c| encoder.embed_plain(c)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    prototypes_from_features(&feats, k)
}

/// `[W_base; W_novel]`, refined by `gat` when given.
pub fn generate_weights(w_base: &Tensor, w_novel: &Tensor, gat: Option<&GatLayer>) -> Result<Tensor> {
    if w_base.cols() != w_novel.cols() {
        return Err(SketchError::DimensionMismatch {
            expected: [w_novel.rows(), w_base.cols()],
            got: w_novel.shape(),
        });
    }
    let mut data = w_base.data().to_vec();
    data.extend_from_slice(w_novel.data());
    let w = Tensor::new(w_base.rows() + w_novel.rows(), w_base.cols(), data)?;
    Ok(match gat {
        Some(g) => g.refine_plain(&w),
        None => w,
    })
}

/// `L_cls` and `L_distil` for query features against generated weights.
///
/// `teacher` holds the frozen base classifier's soft outputs, one column
/// per entry of `base_rows`, which names the row of `w_new` carrying that
/// base class. Distillation compares the student's softmax restricted to
/// those rows and is reported as a KL divergence, so an exact reproduction
/// scores zero.
pub fn fscil_losses<'t>(
    tape: &'t Tape,
    queries: Var<'t>,
    labels: &[usize],
    w_new: Var<'t>,
    teacher: &Tensor,
    base_rows: &[usize],
    scale: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let [q, _] = queries.shape();
    if labels.len() != q || teacher.shape() != [q, base_rows.len()] {
        return Err(SketchError::DimensionMismatch {
            expected: [q, base_rows.len()],
            got: teacher.shape(),
        });
    }
    let logits = CosineClassifier::logits_with(w_new, queries).scale(scale);
    let cls = logits.cross_entropy(labels);
    let [_, rows] = logits.shape();
    let mut select = Tensor::zeros(rows, base_rows.len());
    for (j, &r) in base_rows.iter().enumerate() {
        if r >= rows {
            return Err(SketchError::InvalidArgument(format!("base row {r} out of range")));
        }
        select.set(r, j, 1.0);
    }
    let student = logits.matmul(tape.constant(select));
    let entropy = (0..q)
        .map(|r| teacher.row_slice(r).iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / q as f64;
    let distil = student.soft_cross_entropy(teacher).add_scalar(-entropy);
    Ok((cls, distil))
}

/// Features of one class, split by role.
#[derive(Clone, Debug, Default)]
pub struct ClassBank {
    pub photos: Vec<Vec<f64>>,
    pub sketches: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Novel classes per episode.
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Base classes sampled for the base-only accuracy.
    pub base_ways: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            queries: 15,
            base_ways: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub acc_both: f64,
    pub acc_base: f64,
    pub acc_novel: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of queries whose best cosine score among `rows` is at `rows[label]`.
fn accuracy(w: &Tensor, rows: &[usize], queries: &[(Vec<f64>, usize)]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let w = normalize_rows(w);
    let hits = queries
        .iter()
        .filter(|(f, label)| {
            let f = crate::metrics::normalize(f);
            let scores: Vec<f64> = rows
                .iter()
                .map(|&r| w.row_slice(r).iter().zip(&f).map(|(a, b)| a * b).sum())
                .collect();
            argmax(&scores) == *label
        })
        .count();
    hits as f64 / queries.len() as f64
}

/// Frozen backbone, base classifier and feature banks for evaluation.
pub struct FscilContext {
    /// Row-normalised base weights.
    pub w_base: Tensor,
    pub base_train: Vec<ClassBank>,
    pub base_test: Vec<ClassBank>,
    pub novel: Vec<ClassBank>,
}

/// One evaluation episode. Support sets are sketches only.
pub fn run_episode<R: rand::Rng + ?Sized>(
    ctx: &FscilContext,
    gat: Option<&GatLayer>,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<EpisodeMetrics> {
    let kb = ctx.w_base.rows();
    if spec.ways == 0 || spec.ways > ctx.novel.len() || spec.base_ways > kb || spec.shots == 0 {
        return Err(SketchError::InvalidArgument(format!(
            "episode asks for {} of {} novel and {} of {kb} base classes",
            spec.ways,
            ctx.novel.len(),
            spec.base_ways
        )));
    }
    let novel: Vec<usize> = rand::seq::index::sample(rng, ctx.novel.len(), spec.ways).into_vec();
    let mut support = Vec::with_capacity(spec.ways);
    let mut novel_queries = Vec::new();
    for (j, &c) in novel.iter().enumerate() {
        let bank = &ctx.novel[c];
        let n = bank.sketches.len().min(bank.photos.len());
        if n < spec.shots + spec.queries {
            return Err(SketchError::InvalidArgument(format!(
                "novel class {c} has {n} instances, episode needs {}",
                spec.shots + spec.queries
            )));
        }
        // Exemplars and queries come from disjoint instances.
        let idx = rand::seq::index::sample(rng, n, spec.shots + spec.queries).into_vec();
        support.push(idx[..spec.shots].iter().map(|&i| bank.sketches[i].clone()).collect::<Vec<_>>());
        novel_queries.extend(idx[spec.shots..].iter().map(|&i| (bank.photos[i].clone(), j)));
    }
    let w_novel = prototypes_from_features(&support, spec.shots)?;
    let w_new = generate_weights(&ctx.w_base, &w_novel, gat)?;
    let novel_rows: Vec<usize> = (kb..kb + spec.ways).collect();
    let acc_novel = accuracy(&w_new, &novel_rows, &novel_queries);

    let draw_base = |c: usize, rng: &mut R| -> Result<Vec<(Vec<f64>, usize)>> {
        let bank = &ctx.base_test[c];
        if bank.photos.len() < spec.queries {
            return Err(SketchError::InvalidArgument(format!(
                "base class {c} has {} test photos, episode needs {}",
                bank.photos.len(),
                spec.queries
            )));
        }
        Ok(bank.photos.choose_multiple(rng, spec.queries).map(|f| (f.clone(), c)).collect())
    };
    let base_rows: Vec<usize> = (0..kb).collect();
    let mut base_queries = Vec::new();
    for c in rand::seq::index::sample(rng, kb, spec.base_ways).into_vec() {
        base_queries.extend(draw_base(c, rng)?);
    }
    let acc_base = accuracy(&w_new, &base_rows, &base_queries);

    let all_rows: Vec<usize> = (0..kb + spec.ways).collect();
    let mut both = Vec::new();
    for c in 0..kb {
        both.extend(draw_base(c, rng)?);
    }
    both.extend(novel_queries.iter().map(|(f, j)| (f.clone(), kb + j)));
    let acc_both = accuracy(&w_new, &all_rows, &both);
    Ok(EpisodeMetrics {
        acc_both,
        acc_base,
        acc_novel,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FscilReport {
    pub episodes: Vec<EpisodeMetrics>,
    pub mean: EpisodeMetrics,
}

/// Runs `episodes` independent episodes in parallel.
pub fn evaluate(ctx: &FscilContext, gat: Option<&GatLayer>, spec: &EpisodeSpec, episodes: usize, seed: u64) -> Result<FscilReport> {
    let runs: Vec<EpisodeMetrics> = (0..episodes)
        .into_par_iter()
        .map(|e| run_episode(ctx, gat, spec, &mut rng::stream(seed, &[70, e as u64])))
        .collect::<Result<_>>()?;
    let n = runs.len().max(1) as f64;
    let mean = EpisodeMetrics {
        acc_both: runs.iter().map(|m| m.acc_both).sum::<f64>() / n,
        acc_base: runs.iter().map(|m| m.acc_base).sum::<f64>() / n,
        acc_novel: runs.iter().map(|m| m.acc_novel).sum::<f64>() / n,
    };
    Ok(FscilReport { episodes: runs, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FscilConfig {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub instances_per_class: usize,
    /// Instances per base class used for training; the rest are base test.
    pub base_train: usize,
    /// Multiplier on cosine logits during training.
    pub scale: f64,
    pub consensus: bool,
    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    pub batch: usize,
    pub gat_episodes: usize,
    pub gat_lr: f64,
    pub gat_iterations: usize,
    /// Pseudo-novel classes dropped per training episode.
    pub pseudo_novel: usize,
    pub train_shots: usize,
    pub train_queries: usize,
    pub encoder: RasterEncoderConfig,
    pub line_width: usize,
    pub seed: u64,
}

impl Default for FscilConfig {
    fn default() -> Self {
        Self {
            base_classes: 16,
            novel_classes: 10,
            instances_per_class: 40,
            base_train: 25,
            scale: 10.0,
            consensus: true,
            backbone_epochs: 150,
            backbone_lr: 2e-3,
            batch: 16,
            gat_episodes: 300,
            gat_lr: 1e-3,
            gat_iterations: 1,
            pseudo_novel: 4,
            train_shots: 5,
            train_queries: 5,
            encoder: RasterEncoderConfig::default(),
            line_width: 1,
            seed: 0,
        }
    }
}

impl FscilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pseudo_novel == 0 || self.pseudo_novel >= self.base_classes {
            return Err(SketchError::InvalidArgument("pseudo-novel count must lie in [1, base classes)".into()));
        }
        if self.base_train >= self.instances_per_class || self.train_shots + self.train_queries > self.base_train {
            return Err(SketchError::InvalidArgument("not enough base instances for training and testing".into()));
        }
        Ok(())
    }
}

/// Classes `0..base_classes` are base; the rest are novel.
pub fn fscil_dataset(cfg: &FscilConfig) -> Result<Vec<SyntheticInstance>> {
    gen_synthetic_dataset(&SynthConfig {
        seed: cfg.seed,
        n_classes: cfg.base_classes + cfg.novel_classes,
        n_instances_per_class: cfg.instances_per_class,
        canvas: cfg.encoder.canvas,
        ..Default::default()
    })
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub encoder: RasterEncoder,
    pub classifier: CosineClassifier,
}

#[derive(Clone, Debug)]
struct Labelled {
    photo: RasterCanvas,
    sketch: RasterCanvas,
    label: usize,
}

/// Trains encoder and base cosine classifier on photos and sketches of the
/// base classes. With `consensus` the two domains' gradients are combined
/// by sign agreement; otherwise they are summed.
pub fn train_backbone(data: &[SyntheticInstance], cfg: &FscilConfig) -> Result<(Backbone, Vec<f64>)> {
    let items: Vec<Labelled> = data
        .par_iter()
        .map(|i| {
            let [h, w] = i.photo.dims();
            Ok(Labelled {
                photo: i.photo.clone(),
                sketch: rasterize(&i.sketch, h, w, cfg.line_width)?,
                label: i.class_id,
            })
        })
        .collect::<Result<_>>()?;
    let mut init = rng::stream(cfg.seed, &[71]);
    let mut bb = Backbone {
        encoder: RasterEncoder::new("fscil.enc", cfg.encoder, &mut init),
        classifier: CosineClassifier::new("fscil.base", cfg.base_classes, cfg.encoder.dim, &mut init),
    };
    let mut opt_e = Adam::new(cfg.backbone_lr);
    let mut opt_c = Adam::new(cfg.backbone_lr);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, &[72]);
    let mut losses = Vec::with_capacity(cfg.backbone_epochs);
    for _ in 0..cfg.backbone_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let labels: Vec<usize> = chunk.iter().map(|&i| items[i].label).collect();
            let domain_loss = |bb: &mut Backbone, photo: bool| -> Result<(Vec<Tensor>, Vec<Tensor>, f64)> {
                let tape = Tape::new();
                let feats: Vec<Var<'_>> = chunk
                    .iter()
                    .map(|&i| bb.encoder.embed(&tape, if photo { &items[i].photo } else { &items[i].sketch }))
                    .collect::<Result<_>>()?;
                let loss = bb.classifier.logits(&tape, concat_rows(&feats)).scale(cfg.scale).cross_entropy(&labels);
                let grads = tape.backward(loss)?;
                bb.encoder.zero_grad();
                bb.encoder.accumulate(&grads);
                bb.classifier.zero_grad();
                bb.classifier.accumulate(&grads);
                Ok((grads_of(&bb.encoder), grads_of(&bb.classifier), loss.item()))
            };
            let (pe, pc, lp) = domain_loss(&mut bb, true)?;
            let (se, sc, ls) = domain_loss(&mut bb, false)?;
            if cfg.consensus {
                set_consensus(&mut bb.encoder, &pe, &se)?;
                set_consensus(&mut bb.classifier, &pc, &sc)?;
            } else {
                for (p, g) in bb.encoder.params_mut().into_iter().zip(&pe) {
                    p.grad.add_assign(g);
                }
                for (p, g) in bb.classifier.params_mut().into_iter().zip(&pc) {
                    p.grad.add_assign(g);
                }
            }
            opt_e.step_module(&mut bb.encoder)?;
            opt_c.step_module(&mut bb.classifier)?;
            total += (lp + ls) * chunk.len() as f64;
        }
        losses.push(total / items.len().max(1) as f64);
    }
    Ok((bb, losses))
}

fn bank_of(encoder: &RasterEncoder, instances: &[&SyntheticInstance], line_width: usize) -> Result<ClassBank> {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = instances
        .par_iter()
        .map(|i| {
            let [h, w] = i.photo.dims();
            Ok((encoder.embed_plain(&i.photo)?, encoder.embed_plain(&rasterize(&i.sketch, h, w, line_width)?)?))
        })
        .collect::<Result<_>>()?;
    let (photos, sketches) = pairs.into_iter().unzip();
    Ok(ClassBank { photos, sketches })
}

/// Splits the dataset and embeds every photo and sketch with the frozen
/// backbone.
pub fn build_context(backbone: &Backbone, data: &[SyntheticInstance], cfg: &FscilConfig) -> Result<FscilContext> {
    let total = cfg.base_classes + cfg.novel_classes;
    let mut per_class: Vec<Vec<&SyntheticInstance>> = vec![Vec::new(); total];
    for i in data {
        per_class
            .get_mut(i.class_id)
            .ok_or_else(|| SketchError::InvalidArgument(format!("class {} out of range", i.class_id)))?
            .push(i);
    }
    let mut base_train = Vec::with_capacity(cfg.base_classes);
    let mut base_test = Vec::with_capacity(cfg.base_classes);
    for class in &per_class[..cfg.base_classes] {
        let cut = cfg.base_train.min(class.len());
        base_train.push(bank_of(&backbone.encoder, &class[..cut], cfg.line_width)?);
        base_test.push(bank_of(&backbone.encoder, &class[cut..], cfg.line_width)?);
    }
    let novel = per_class[cfg.base_classes..]
        .iter()
        .map(|c| bank_of(&backbone.encoder, c, cfg.line_width))
        .collect::<Result<_>>()?;
    Ok(FscilContext {
        w_base: normalize_rows(&backbone.classifier.w.value),
        base_train,
        base_test,
        novel,
    })
}

/// Base-class training instances (the first `base_train` of each class).
pub fn base_training_split(data: &[SyntheticInstance], cfg: &FscilConfig) -> Vec<SyntheticInstance> {
    let mut seen = vec![0usize; cfg.base_classes];
    data.iter()
        .filter(|i| {
            i.class_id < cfg.base_classes && {
                seen[i.class_id] += 1;
                seen[i.class_id] <= cfg.base_train
            }
        })
        .cloned()
        .collect()
}

/// One pseudo-incremental episode's loss for a given support modality.
#[allow(clippy::too_many_arguments)]
fn pseudo_loss<'t>(
    tape: &'t Tape,
    gat: &GatLayer,
    ctx: &FscilContext,
    kept: &[usize],
    dropped: &[usize],
    support: &[Vec<Vec<f64>>],
    queries: &Tensor,
    labels: &[usize],
    teacher: &Tensor,
    cfg: &FscilConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let w_novel = prototypes_from_features(support, cfg.train_shots)?;
    let kept_rows: Vec<Vec<f64>> = kept.iter().map(|&c| ctx.w_base.row_slice(c).to_vec()).collect();
    let w_in = generate_weights(&Tensor::from_rows(&kept_rows)?, &w_novel, None)?;
    let w_new = gat.forward(tape, tape.constant(w_in));
    // Row of w_new holding each original base class.
    let mut base_rows = vec![0; ctx.w_base.rows()];
    for (r, &c) in kept.iter().chain(dropped).enumerate() {
        base_rows[c] = r;
    }
    let row_labels: Vec<usize> = labels.iter().map(|&c| base_rows[c]).collect();
    fscil_losses(tape, tape.constant(queries.clone()), &row_labels, w_new, teacher, &base_rows, cfg.scale)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GatLog {
    pub episode: usize,
    pub cls: f64,
    pub distil: f64,
}

/// Episodic pseudo-incremental training of the weight generator over base
/// classes. Sketch-support and photo-support gradients are combined by
/// consensus.
pub fn train_generator(ctx: &FscilContext, cfg: &FscilConfig) -> Result<(GatLayer, Vec<GatLog>)> {
    cfg.validate()?;
    let kb = ctx.w_base.rows();
    let d = ctx.w_base.cols();
    let mut gat = GatLayer::new("fscil.gat", d, &mut rng::stream(cfg.seed, &[73]));
    gat.iterations = cfg.gat_iterations;
    let mut adam = Adam::new(cfg.gat_lr);
    let mut log = Vec::with_capacity(cfg.gat_episodes);
    for e in 0..cfg.gat_episodes {
        let mut r = rng::stream(cfg.seed, &[74, e as u64]);
        let mut classes: Vec<usize> = (0..kb).collect();
        classes.shuffle(&mut r);
        let (dropped, kept) = classes.split_at(cfg.pseudo_novel);
        let mut support_s = vec![Vec::new(); kb];
        let mut support_p = vec![Vec::new(); kb];
        let mut qf = Vec::new();
        let mut labels = Vec::new();
        for c in 0..kb {
            let bank = &ctx.base_train[c];
            let n = bank.photos.len();
            let is_novel = dropped.contains(&c);
            let need = cfg.train_queries + if is_novel { cfg.train_shots } else { 0 };
            if n < need {
                return Err(SketchError::InvalidArgument(format!("base class {c} has too few training instances")));
            }
            let idx = rand::seq::index::sample(&mut r, n, need).into_vec();
            qf.extend(idx[..cfg.train_queries].iter().map(|&i| bank.photos[i].clone()));
            labels.extend(std::iter::repeat_n(c, cfg.train_queries));
            if is_novel {
                support_s[c] = idx[cfg.train_queries..].iter().map(|&i| bank.sketches[i].clone()).collect();
                support_p[c] = idx[cfg.train_queries..].iter().map(|&i| bank.photos[i].clone()).collect();
            }
        }
        // Novel rows follow the order of `dropped`.
        let sup_s: Vec<Vec<Vec<f64>>> = dropped.iter().map(|&c| support_s[c].clone()).collect();
        let sup_p: Vec<Vec<Vec<f64>>> = dropped.iter().map(|&c| support_p[c].clone()).collect();
        let queries = Tensor::from_rows(&qf)?;
        let teacher = {
            let tape = Tape::inference();
            CosineClassifier::logits_with(tape.constant(ctx.w_base.clone()), tape.constant(queries.clone()))
                .scale(cfg.scale)
                .softmax()
                .value()
        };
        let mut run = |support: &[Vec<Vec<f64>>]| -> Result<(Vec<Tensor>, f64, f64)> {
            let tape = Tape::new();
            let (cls, distil) = pseudo_loss(&tape, &gat, ctx, kept, dropped, support, &queries, &labels, &teacher, cfg)?;
            let grads = tape.backward(cls.add(distil))?;
            gat.zero_grad();
            gat.accumulate(&grads);
            Ok((grads_of(&gat), cls.item(), distil.item()))
        };
        let (gs, cls, distil) = run(&sup_s)?;
        let (gp, _, _) = run(&sup_p)?;
        set_consensus(&mut gat, &gp, &gs)?;
        adam.step_module(&mut gat)?;
        log.push(GatLog { episode: e, cls, distil });
    }
    Ok((gat, log))
}

pub struct FscilOutcome {
    pub backbone: Backbone,
    pub context: FscilContext,
    pub gat: GatLayer,
    pub backbone_losses: Vec<f64>,
    pub gat_log: Vec<GatLog>,
}

/// Both training stages on the synthetic class-level dataset.
pub fn train_fscil(cfg: &FscilConfig) -> Result<FscilOutcome> {
    cfg.validate()?;
    let data = fscil_dataset(cfg)?;
    let (backbone, backbone_losses) = train_backbone(&base_training_split(&data, cfg), cfg)?;
    let context = build_context(&backbone, &data, cfg)?;
    let (gat, gat_log) = train_generator(&context, cfg)?;
    Ok(FscilOutcome {
        backbone,
        context,
        gat,
        backbone_losses,
        gat_log,
    })
}
