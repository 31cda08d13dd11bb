//! Two-branch triplet retrieval model over raster inputs.

use autodiff::{concat_rows, Adam, Module, Param, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};
use crate::metrics::{triplet_loss_var, Gallery};
use crate::models::{RasterEncoder, RasterEncoderConfig};
use crate::rng;
use crate::sketch::{rasterize, RasterCanvas, SyntheticInstance, VectorSketch};

pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_LINE_WIDTH: usize = 1;

/// A photo and a rasterised sketch of the same instance.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub instance_id: u64,
    pub photo: RasterCanvas,
    pub sketch: RasterCanvas,
}

impl TrainPair {
    pub fn new(instance_id: u64, photo: RasterCanvas, sketch: &VectorSketch, line_width: usize) -> Result<Self> {
        let [h, w] = photo.dims();
        Ok(Self {
            instance_id,
            sketch: rasterize(sketch, h, w, line_width)?,
            photo,
        })
    }
}

pub fn pairs_from_instances(instances: &[SyntheticInstance], line_width: usize) -> Result<Vec<TrainPair>> {
    instances
        .iter()
        .map(|i| TrainPair::new(i.instance_id, i.photo.clone(), &i.sketch, line_width))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RetrievalModel {
    pub photo: RasterEncoder,
    pub sketch: RasterEncoder,
    pub line_width: usize,
}

impl RetrievalModel {
    pub fn new<R: Rng + ?Sized>(cfg: RasterEncoderConfig, rng: &mut R) -> Self {
        Self {
            photo: RasterEncoder::new("photo", cfg, rng),
            sketch: RasterEncoder::new("sketch", cfg, rng),
            line_width: DEFAULT_LINE_WIDTH,
        }
    }

    pub fn canvas_size(&self) -> usize {
        self.sketch.config().canvas
    }

    pub fn rasterize(&self, sketch: &VectorSketch) -> Result<RasterCanvas> {
        let n = self.canvas_size();
        rasterize(sketch, n, n, self.line_width)
    }

    pub fn embed_photo(&self, photo: &RasterCanvas) -> Result<Vec<f64>> {
        self.photo.embed_plain(photo)
    }

    pub fn embed_sketch(&self, sketch: &VectorSketch) -> Result<Vec<f64>> {
        self.sketch.embed_plain(&self.rasterize(sketch)?)
    }

    pub fn gallery(&self, photos: &[(u64, &RasterCanvas)]) -> Result<Gallery> {
        let emb: Result<Vec<Vec<f64>>> = photos.par_iter().map(|(_, p)| self.embed_photo(p)).collect();
        Gallery::new(emb?, photos.iter().map(|(id, _)| *id).collect())
    }

    pub fn gallery_of(&self, instances: &[SyntheticInstance]) -> Result<Gallery> {
        let photos: Vec<(u64, &RasterCanvas)> = instances.iter().map(|i| (i.instance_id, &i.photo)).collect();
        self.gallery(&photos)
    }

    /// Ranks of each query sketch canvas against `gallery`.
    pub fn ranks(&self, queries: &[(u64, &RasterCanvas)], gallery: &Gallery) -> Result<Vec<usize>> {
        queries
            .par_iter()
            .map(|(id, c)| Ok(gallery.rank_of(&self.sketch.embed_plain(c)?, *id)?.0))
            .collect()
    }

    pub fn sketch_ranks(&self, queries: &[(u64, &VectorSketch)], gallery: &Gallery) -> Result<Vec<usize>> {
        let canvases: Vec<(u64, RasterCanvas)> = queries
            .iter()
            .map(|(id, s)| Ok((*id, self.rasterize(s)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<(u64, &RasterCanvas)> = canvases.iter().map(|(id, c)| (*id, c)).collect();
        self.ranks(&refs, gallery)
    }
}

impl Module for RetrievalModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.photo.params();
        v.extend(self.sketch.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.photo.params_mut();
        v.extend(self.sketch.params_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            epochs: 40,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Batch triplet loss: anchors are sketches, positives their photos and
/// negatives the photos at `negatives`.
pub fn triplet_batch_loss<'t>(
    model: &RetrievalModel,
    tape: &'t Tape,
    pairs: &[TrainPair],
    batch: &[usize],
    negatives: &[usize],
    margin: f64,
) -> Result<autodiff::Var<'t>> {
    let mut a = Vec::with_capacity(batch.len());
    let mut p = Vec::with_capacity(batch.len());
    let mut n = Vec::with_capacity(batch.len());
    for (&i, &j) in batch.iter().zip(negatives) {
        a.push(model.sketch.embed(tape, &pairs[i].sketch)?);
        p.push(model.photo.embed(tape, &pairs[i].photo)?);
        n.push(model.photo.embed(tape, &pairs[j].photo)?);
    }
    Ok(triplet_loss_var(concat_rows(&a), concat_rows(&p), concat_rows(&n), margin))
}

/// Uniform negative index different from `i`.
pub fn sample_negative<R: Rng + ?Sized>(i: usize, n: usize, rng: &mut R) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

pub fn train_triplet(model: &mut RetrievalModel, pairs: &[TrainPair], cfg: &TripletConfig) -> Result<TrainReport> {
    if pairs.len() < 2 {
        return Err(SketchError::InvalidArgument("triplet training needs at least 2 pairs".into()));
    }
    if cfg.batch == 0 {
        return Err(SketchError::InvalidArgument("batch must be at least 1".into()));
    }
    let mut rng = rng::stream(cfg.seed, &[10]);
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let negs: Vec<usize> = chunk.iter().map(|&i| sample_negative(i, pairs.len(), &mut rng)).collect();
            let tape = Tape::new();
            let loss = triplet_batch_loss(model, &tape, pairs, chunk, &negs, cfg.margin)?;
            let grads = tape.backward(loss)?;
            model.zero_grad();
            model.accumulate(&grads);
            adam.step_module(model)?;
            report.step_losses.push(loss.item());
            total += loss.item() * chunk.len() as f64;
        }
        let mean = total / pairs.len() as f64;
        log::debug!("triplet epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
