//! Semi-supervised retrieval with a photo-to-sketch generator: VAE
//! pretraining, discriminator-weighted pseudo pairs, relative-teacher
//! distillation and REINFORCE on the decoder output layer.

use autodiff::{concat_rows, Adam, Module, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};
use crate::metrics::{distance_var, euclidean, triplet_loss, triplet_loss_var};
use crate::models::{to_sequence, Discriminator, GeneratedSequence, GeneratorConfig, RasterEncoderConfig, SketchGenerator};
use crate::retrieval::{pairs_from_instances, sample_negative, train_triplet, RetrievalModel, TrainPair, TripletConfig};
use crate::rng;
use crate::sketch::{RasterCanvas, SyntheticInstance, VectorSketch};

/// Closed-form `KL(N(μ, σ²) ‖ N(0, 1))` summed over dimensions.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

/// `L^R + ω_kl·KL`.
pub fn vae_loss(reconstruction: f64, kl: f64, omega_kl: f64) -> f64 {
    reconstruction + omega_kl * kl
}

/// Mean binary cross-entropy of discriminator outputs, scores clamped to
/// `[1e-12, 1]` before the log.
pub fn discriminator_bce(real: &[f64], fake: &[f64]) -> Result<f64> {
    let n = real.len() + fake.len();
    if n == 0 {
        return Err(SketchError::InvalidArgument("discriminator loss over no pairs".into()));
    }
    let r: f64 = real.iter().map(|&d| -d.clamp(1e-12, 1.0).ln()).sum();
    let f: f64 = fake.iter().map(|&d| -(1.0 - d).clamp(1e-12, 1.0).ln()).sum();
    Ok((r + f) / n as f64)
}

/// `|d(F^T(p), F^T(s)) − d(F(p), F(s))|` from precomputed embeddings.
pub fn kd_relative(teacher: (&[f64], &[f64]), student: (&[f64], &[f64])) -> f64 {
    (euclidean(teacher.0, teacher.1) - euclidean(student.0, student.1)).abs()
}

/// `−λ_r1·L_trip + λ_r2·D_C`.
pub fn generator_reward(triplet: f64, realness: f64, lambda_r1: f64, lambda_r2: f64) -> f64 {
    -lambda_r1 * triplet + lambda_r2 * realness
}

/// A pseudo pair: an unlabelled photo and its generated sketch raster.
#[derive(Clone, Debug)]
pub struct PseudoPair {
    pub instance_id: u64,
    pub photo: RasterCanvas,
    pub sketch: VectorSketch,
    pub canvas: RasterCanvas,
}

/// Index triplets into a pair list: anchor/positive `i`, negative `j`.
pub type TripletIdx = (usize, usize);

/// `L_trip(labelled) + mean_j ω_j L_trip(pseudo_j) + λ_kd L_KD(pseudo)`.
#[allow(clippy::too_many_arguments)]
pub fn semisup_retrieval_loss<'t>(
    tape: &'t Tape,
    student: &RetrievalModel,
    teacher: &RetrievalModel,
    labelled: &[TrainPair],
    lab_idx: &[TripletIdx],
    pseudo: &[TrainPair],
    pseudo_idx: &[TripletIdx],
    weights: &[f64],
    margin: f64,
    lambda_kd: f64,
) -> Result<Var<'t>> {
    if lab_idx.is_empty() {
        return Err(SketchError::InvalidArgument("semi-supervised loss needs labelled triplets".into()));
    }
    if weights.len() != pseudo_idx.len() {
        return Err(SketchError::InvalidArgument("one weight per pseudo triplet".into()));
    }
    let embed = |set: &[TrainPair], idx: &[TripletIdx]| -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let mut a = Vec::new();
        let mut p = Vec::new();
        let mut n = Vec::new();
        for &(i, j) in idx {
            a.push(student.sketch.embed(tape, &set[i].sketch)?);
            p.push(student.photo.embed(tape, &set[i].photo)?);
            n.push(student.photo.embed(tape, &set[j].photo)?);
        }
        Ok((concat_rows(&a), concat_rows(&p), concat_rows(&n)))
    };
    let (a, p, n) = embed(labelled, lab_idx)?;
    let mut loss = triplet_loss_var(a, p, n, margin);
    if !pseudo_idx.is_empty() {
        let (a, p, n) = embed(pseudo, pseudo_idx)?;
        let per = distance_var(a, p).sub(distance_var(a, n)).add_scalar(margin).relu();
        let w = tape.constant(autodiff::Tensor::column(weights));
        loss = loss.add(per.mul(w).mean());
        if lambda_kd != 0.0 {
            let td: Vec<f64> = pseudo_idx
                .iter()
                .map(|&(i, _)| {
                    Ok(euclidean(
                        &teacher.photo.embed_plain(&pseudo[i].photo)?,
                        &teacher.sketch.embed_plain(&pseudo[i].sketch)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let kd = distance_var(p, a)
                .sub(tape.constant(autodiff::Tensor::column(&td)))
                .abs()
                .mean();
            loss = loss.add(kd.scale(lambda_kd));
        }
    }
    Ok(loss)
}

/// Teacher-forced VAE objective averaged over a batch.
pub fn vae_batch_loss<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    gen: &SketchGenerator,
    batch: &[(&RasterCanvas, &[(f64, f64, usize)])],
    omega_kl: f64,
    rng: &mut R,
) -> Result<Var<'t>> {
    let mut terms = Vec::with_capacity(batch.len());
    for (photo, seq) in batch {
        let (recon, kl) = gen.vae_terms(tape, photo, seq, rng)?;
        terms.push(recon.add(kl.scale(omega_kl)));
    }
    if terms.is_empty() {
        return Err(SketchError::InvalidArgument("vae loss over an empty batch".into()));
    }
    Ok(concat_rows(&terms).mean())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub omega_kl: f64,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch: 8,
            lr: 2e-3,
            omega_kl: 1.0,
            seed: 0,
        }
    }
}

/// Supervised VAE training of all generator parameters.
pub fn train_generator(
    gen: &mut SketchGenerator,
    data: &[(RasterCanvas, Vec<(f64, f64, usize)>)],
    cfg: &GeneratorTrainConfig,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(cfg.lr);
    let mut rng = rng::stream(cfg.seed, &[50]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<(&RasterCanvas, &[(f64, f64, usize)])> =
                chunk.iter().map(|&i| (&data[i].0, data[i].1.as_slice())).collect();
            let tape = Tape::new();
            let loss = vae_batch_loss(&tape, gen, &batch, cfg.omega_kl, &mut rng)?;
            let grads = tape.backward(loss)?;
            gen.zero_grad();
            gen.accumulate(&grads);
            autodiff::clip_grad_norm(gen.params_mut(), 1.0);
            adam.step_module(gen)?;
            total += loss.item() * chunk.len() as f64;
        }
        losses.push(total / data.len().max(1) as f64);
    }
    Ok(losses)
}

/// Gradient of `L^vae(labelled) − λ_G Σ_j R_j log p(sequence_j)` applied to
/// the decoder output layer only.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_generator_update<R: Rng + ?Sized>(
    gen: &mut SketchGenerator,
    adam: &mut Adam,
    labelled: &[(&RasterCanvas, &[(f64, f64, usize)])],
    sampled: &[(&GeneratedSequence, f64)],
    lambda_g: f64,
    omega_kl: f64,
    rng: &mut R,
) -> Result<f64> {
    let tape = Tape::new();
    let mut loss = if labelled.is_empty() {
        tape.scalar(0.0)
    } else {
        vae_batch_loss(&tape, gen, labelled, omega_kl, rng)?
    };
    if !sampled.is_empty() {
        let pg: Vec<Var<'_>> = sampled
            .iter()
            .map(|(seq, r)| gen.output_log_prob(&tape, &seq.steps).scale(*r))
            .collect();
        loss = loss.sub(concat_rows(&pg).mean().scale(lambda_g));
    }
    let grads = tape.backward(loss)?;
    let mut out = gen.output_params_mut();
    for p in out.iter_mut() {
        p.zero_grad();
        p.accumulate(&grads);
    }
    autodiff::clip_grad_norm(gen.output_params_mut(), 1.0);
    adam.step(gen.output_params_mut())?;
    Ok(loss.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupConfig {
    pub k_r: usize,
    pub k_g: usize,
    pub rounds: usize,
    pub lambda_kd: f64,
    pub lambda_r1: f64,
    pub lambda_r2: f64,
    pub lambda_g: f64,
    pub omega_kl: f64,
    pub batch: usize,
    pub lr: f64,
    pub encoder: RasterEncoderConfig,
    pub generator: GeneratorConfig,
    pub pretrain: TripletConfig,
    pub generator_pretrain: GeneratorTrainConfig,
    pub discriminator_hidden: usize,
    pub seed: u64,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            k_r: 5,
            k_g: 5,
            rounds: 10,
            lambda_kd: 0.1,
            lambda_r1: 1.0,
            lambda_r2: 1.0,
            lambda_g: 10.0,
            omega_kl: 1.0,
            batch: 16,
            lr: 1e-3,
            encoder: RasterEncoderConfig::default(),
            generator: GeneratorConfig::default(),
            pretrain: TripletConfig::default(),
            generator_pretrain: GeneratorTrainConfig::default(),
            discriminator_hidden: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemiSupRoundLog {
    pub round: usize,
    pub retrieval_loss: f64,
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    pub mean_weight: f64,
    pub mean_reward: f64,
}

pub struct SemiSupOutcome {
    /// Labelled-only model after pretraining.
    pub baseline: RetrievalModel,
    pub retrieval: RetrievalModel,
    pub generator: SketchGenerator,
    pub discriminator: Discriminator,
    pub log: Vec<SemiSupRoundLog>,
}

/// Greedy pseudo sketches for unlabelled photos.
pub fn generate_pseudo_pairs(
    gen: &SketchGenerator,
    photos: &[(u64, &RasterCanvas)],
    line_width: usize,
) -> Result<Vec<PseudoPair>> {
    photos
        .par_iter()
        .map(|(id, photo)| {
            let mut unused = rng::stream(0, &[]);
            let seq = gen.generate(photo, true, &mut unused)?;
            let [h, w] = photo.dims();
            Ok(PseudoPair {
                instance_id: *id,
                photo: (*photo).clone(),
                canvas: crate::sketch::rasterize(&seq.sketch, h, w, line_width)?,
                sketch: seq.sketch,
            })
        })
        .collect()
}

fn pick<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Pretrains retrieval and generator on the labelled set, then alternates
/// `k_r` discriminator+retrieval steps with `k_g` generator steps per round.
pub fn joint_train(
    labelled: &[SyntheticInstance],
    unlabelled: &[(u64, &RasterCanvas)],
    cfg: &SemiSupConfig,
) -> Result<SemiSupOutcome> {
    if labelled.len() < 2 {
        return Err(SketchError::InvalidArgument("semi-supervised training needs ≥ 2 labelled pairs".into()));
    }
    let mut init = rng::stream(cfg.seed, &[51]);
    let mut retrieval = RetrievalModel::new(cfg.encoder, &mut init);
    let lab_pairs = pairs_from_instances(labelled, retrieval.line_width)?;
    train_triplet(&mut retrieval, &lab_pairs, &cfg.pretrain)?;
    let baseline = retrieval.clone();
    let teacher = retrieval.clone();
    let mut generator = SketchGenerator::new("generator", cfg.generator, &mut init);
    let sequences: Vec<(RasterCanvas, Vec<(f64, f64, usize)>)> = labelled
        .iter()
        .map(|i| (i.photo.clone(), to_sequence(&i.sketch)))
        .collect();
    train_generator(&mut generator, &sequences, &cfg.generator_pretrain)?;
    let mut disc = Discriminator::new("discriminator", cfg.encoder.canvas, 4, cfg.discriminator_hidden, &mut init);

    let mut opt_f = Adam::new(cfg.lr);
    let mut opt_d = Adam::new(cfg.lr);
    let mut opt_g = Adam::new(cfg.lr);
    let mut rng = rng::stream(cfg.seed, &[52]);
    let mut log = Vec::with_capacity(cfg.rounds);
    let b = cfg.batch.max(1);
    for round in 0..cfg.rounds {
        let mut entry = SemiSupRoundLog {
            round,
            ..Default::default()
        };
        let pseudo = if unlabelled.is_empty() {
            Vec::new()
        } else {
            generate_pseudo_pairs(&generator, unlabelled, retrieval.line_width)?
        };
        let pseudo_pairs: Vec<TrainPair> = pseudo
            .iter()
            .map(|p| TrainPair {
                instance_id: p.instance_id,
                photo: p.photo.clone(),
                sketch: p.canvas.clone(),
            })
            .collect();
        for _ in 0..cfg.k_r {
            let li = pick(lab_pairs.len(), b, &mut rng);
            let pi = if pseudo_pairs.is_empty() { Vec::new() } else { pick(pseudo_pairs.len(), b, &mut rng) };
            // Discriminator: real labelled pairs against pseudo pairs.
            let real: Vec<(&RasterCanvas, &RasterCanvas)> =
                li.iter().map(|&i| (&lab_pairs[i].photo, &lab_pairs[i].sketch)).collect();
            let fake: Vec<(&RasterCanvas, &RasterCanvas)> =
                pi.iter().map(|&i| (&pseudo_pairs[i].photo, &pseudo_pairs[i].sketch)).collect();
            let tape = Tape::new();
            let dl = disc.loss(&tape, &real, &fake)?;
            let grads = tape.backward(dl)?;
            disc.zero_grad();
            disc.accumulate(&grads);
            opt_d.step_module(&mut disc)?;
            entry.discriminator_loss += dl.item() / cfg.k_r as f64;
            // Retrieval: instance-weighted triplets plus distillation.
            let lab_idx: Vec<TripletIdx> = li.iter().map(|&i| (i, sample_negative(i, lab_pairs.len(), &mut rng))).collect();
            let pseudo_idx: Vec<TripletIdx> = if pseudo_pairs.len() >= 2 {
                pi.iter().map(|&i| (i, sample_negative(i, pseudo_pairs.len(), &mut rng))).collect()
            } else {
                Vec::new()
            };
            let weights: Vec<f64> = pseudo_idx
                .iter()
                .map(|&(i, _)| disc.score(&pseudo_pairs[i].photo, &pseudo_pairs[i].sketch))
                .collect::<Result<_>>()?;
            if !weights.is_empty() {
                entry.mean_weight += weights.iter().sum::<f64>() / weights.len() as f64 / cfg.k_r as f64;
            }
            let tape = Tape::new();
            let fl = semisup_retrieval_loss(
                &tape,
                &retrieval,
                &teacher,
                &lab_pairs,
                &lab_idx,
                &pseudo_pairs,
                &pseudo_idx,
                &weights,
                cfg.pretrain.margin,
                cfg.lambda_kd,
            )?;
            let grads = tape.backward(fl)?;
            retrieval.zero_grad();
            retrieval.accumulate(&grads);
            opt_f.step_module(&mut retrieval)?;
            entry.retrieval_loss += fl.item() / cfg.k_r as f64;
        }
        let gallery_photos: Vec<(u64, &RasterCanvas)> = labelled
            .iter()
            .map(|i| (i.instance_id, &i.photo))
            .chain(unlabelled.iter().copied())
            .collect();
        for _ in 0..cfg.k_g {
            // Sampled sketches for labelled and unlabelled photos.
            let picks = pick(gallery_photos.len(), b, &mut rng);
            let seeds: Vec<u64> = picks.iter().map(|_| rng.random()).collect();
            let samples: Vec<(GeneratedSequence, f64)> = picks
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| {
                    let (_, photo) = gallery_photos[i];
                    let mut r = rng::stream(s, &[]);
                    let seq = generator.generate(photo, false, &mut r)?;
                    let canvas = retrieval.rasterize(&seq.sketch)?;
                    let j = sample_negative(i, gallery_photos.len(), &mut r);
                    let trip = triplet_loss(
                        &retrieval.sketch.embed_plain(&canvas)?,
                        &retrieval.embed_photo(photo)?,
                        &retrieval.embed_photo(gallery_photos[j].1)?,
                        cfg.pretrain.margin,
                    );
                    let d = disc.score(photo, &canvas)?;
                    Ok((seq, generator_reward(trip, d, cfg.lambda_r1, cfg.lambda_r2)))
                })
                .collect::<Result<_>>()?;
            entry.mean_reward += samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64 / cfg.k_g as f64;
            let lab: Vec<(&RasterCanvas, &[(f64, f64, usize)])> = pick(sequences.len(), b.min(4), &mut rng)
                .into_iter()
                .map(|i| (&sequences[i].0, sequences[i].1.as_slice()))
                .collect();
            let refs: Vec<(&GeneratedSequence, f64)> = samples.iter().map(|(s, r)| (s, *r)).collect();
            let gl = reinforce_generator_update(&mut generator, &mut opt_g, &lab, &refs, cfg.lambda_g, cfg.omega_kl, &mut rng)?;
            entry.generator_loss += gl / cfg.k_g as f64;
        }
        log::info!("semisup round {round}: {entry:?}");
        log.push(entry);
    }
    Ok(SemiSupOutcome {
        baseline,
        retrieval,
        generator,
        discriminator: disc,
        log,
    })
}
