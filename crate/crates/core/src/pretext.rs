//! Cross-modal pretext tasks (raster→vector and vector→raster) and the
//! linear / fine-tuning evaluation harness.

use autodiff::{concat_rows, Adam, Linear, Module, Param, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};
use crate::models::{GruCell, RasterEncoder, RasterEncoderConfig};
use crate::rng;
use crate::sketch::{rasterize, PenState, RasterCanvas, SyntheticInstance, VectorSketch};

/// A sketch in both modalities, with no label attached.
#[derive(Clone, Debug)]
pub struct UnlabelledSketch {
    pub sketch: VectorSketch,
    pub canvas: RasterCanvas,
}

/// The only view of a dataset that pretext training receives.
pub fn unlabelled_view(instances: &[SyntheticInstance], line_width: usize) -> Result<Vec<UnlabelledSketch>> {
    instances
        .iter()
        .map(|i| {
            let [h, w] = i.photo.dims();
            Ok(UnlabelledSketch {
                canvas: rasterize(&i.sketch, h, w, line_width)?,
                sketch: i.sketch.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextTask {
    Vectorization,
    Rasterization,
}

/// Five-element point rows `(x, y, q1, q2, q3)`, truncated to `max_len`
/// with the final kept point marked end-of-drawing.
pub fn point_rows(sketch: &VectorSketch, max_len: usize) -> Vec<[f64; 5]> {
    let mut rows: Vec<[f64; 5]> = sketch.points().map(|p| p.five()).take(max_len).collect();
    if let Some(last) = rows.last_mut() {
        let end = PenState::End.one_hot();
        last[2..].copy_from_slice(&end);
    }
    rows
}

/// Coordinate and pen parts of the vectorization loss for `T×5` predictions
/// (`x, y` then three pen logits) against five-element targets.
pub fn vectorization_loss_parts<'t>(tape: &'t Tape, pred: Var<'t>, target: &[[f64; 5]]) -> Result<(Var<'t>, Var<'t>)> {
    let [t, c] = pred.shape();
    if t != target.len() || c != 5 || t == 0 {
        return Err(SketchError::DimensionMismatch {
            expected: [target.len(), 5],
            got: [t, c],
        });
    }
    let xy: Vec<Vec<f64>> = target.iter().map(|r| r[..2].to_vec()).collect();
    let coord = pred
        .slice_cols(0, 2)
        .sub(tape.constant(Tensor::from_rows(&xy)?))
        .square()
        .sum_cols()
        .mean();
    let pens: Vec<usize> = target
        .iter()
        .map(|r| (0..3).max_by(|&a, &b| r[2 + a].total_cmp(&r[2 + b])).unwrap_or(0))
        .collect();
    let pen = pred.slice_cols(2, 5).cross_entropy(&pens);
    Ok((coord, pen))
}

/// `L_{I→V}` on plain predictions.
pub fn vectorization_loss(pred: &[[f64; 5]], target: &[[f64; 5]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(SketchError::InvalidArgument(format!(
            "prediction length {} differs from target length {}",
            pred.len(),
            target.len()
        )));
    }
    let tape = Tape::inference();
    let rows: Vec<Vec<f64>> = pred.iter().map(|r| r.to_vec()).collect();
    let (c, p) = vectorization_loss_parts(&tape, tape.constant(Tensor::from_rows(&rows)?), target)?;
    Ok(c.item() + p.item())
}

/// `L_{V→I}`: mean squared pixel error.
pub fn rasterization_loss(decoded: &RasterCanvas, target: &RasterCanvas) -> Result<f64> {
    if decoded.dims() != target.dims() {
        return Err(SketchError::DimensionMismatch {
            expected: target.dims(),
            got: decoded.dims(),
        });
    }
    let n = target.data().len() as f64;
    Ok(decoded
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Recurrent encoder over five-element points; the feature is the final
/// hidden state.
#[derive(Debug, Clone)]
pub struct VectorEncoder {
    pub cell: GruCell,
}

impl VectorEncoder {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            cell: GruCell::new(&format!("{name}.cell"), 5, dim, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, sketch: &VectorSketch, max_len: usize) -> Result<Var<'t>> {
        let rows: Vec<Vec<f64>> = point_rows(sketch, max_len).iter().map(|r| r.to_vec()).collect();
        if rows.is_empty() {
            return Err(SketchError::EmptySketch);
        }
        let xs = tape.constant(Tensor::from_rows(&rows)?);
        Ok(*self.cell.run(tape, xs).last().expect("non-empty"))
    }
}

impl Module for VectorEncoder {
    fn params(&self) -> Vec<&Param> {
        self.cell.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.cell.params_mut()
    }
}

/// The transferable half of a pretext model.
#[derive(Debug, Clone)]
pub enum PretextEncoder {
    Raster(RasterEncoder),
    Vector(VectorEncoder),
}

impl PretextEncoder {
    pub fn new<R: Rng + ?Sized>(task: PretextTask, cfg: &PretextConfig, rng: &mut R) -> Self {
        match task {
            PretextTask::Vectorization => Self::Raster(RasterEncoder::new("pretext.enc", cfg.encoder, rng)),
            PretextTask::Rasterization => Self::Vector(VectorEncoder::new("pretext.enc", cfg.encoder.dim, rng)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Raster(e) => e.config().dim,
            Self::Vector(e) => e.cell.hidden(),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: &UnlabelledSketch, max_len: usize) -> Result<Var<'t>> {
        match self {
            Self::Raster(e) => e.embed(tape, &x.canvas),
            Self::Vector(e) => e.forward(tape, &x.sketch, max_len),
        }
    }

    pub fn features(&self, x: &UnlabelledSketch, max_len: usize) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        Ok(self.forward(&tape, x, max_len)?.value().into_data())
    }
}

impl Module for PretextEncoder {
    fn params(&self) -> Vec<&Param> {
        match self {
            Self::Raster(e) => e.params(),
            Self::Vector(e) => e.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Self::Raster(e) => e.params_mut(),
            Self::Vector(e) => e.params_mut(),
        }
    }
}

/// Recurrent decoder to absolute coordinates and pen logits.
#[derive(Debug, Clone)]
pub struct VectorDecoder {
    pub init: Linear,
    pub cell: GruCell,
    pub out: Linear,
}

const START_ROW: [f64; 5] = [0.0, 0.0, 1.0, 0.0, 0.0];

impl VectorDecoder {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            init: Linear::new(&format!("{name}.init"), dim, hidden, rng),
            cell: GruCell::new(&format!("{name}.cell"), 5, hidden, rng),
            out: Linear::new(&format!("{name}.out"), hidden, 5, rng),
        }
    }

    /// Teacher-forced predictions (`T×5`) for `target`.
    pub fn teacher_forced<'t>(&self, tape: &'t Tape, feature: Var<'t>, target: &[[f64; 5]]) -> Result<Var<'t>> {
        if target.is_empty() {
            return Err(SketchError::EmptySketch);
        }
        let mut inputs = vec![START_ROW.to_vec()];
        inputs.extend(target[..target.len() - 1].iter().map(|r| r.to_vec()));
        let xs = tape.constant(Tensor::from_rows(&inputs)?);
        let mut h = self.init.forward(tape, feature).tanh();
        let mut outs = Vec::with_capacity(target.len());
        for t in 0..target.len() {
            h = self.cell.step(tape, xs.row(t), h);
            outs.push(h);
        }
        Ok(self.out.forward(tape, concat_rows(&outs)))
    }

    /// Greedy decoding until end-of-drawing or `max_len` points.
    pub fn greedy(&self, feature: &[f64], max_len: usize) -> Vec<[f64; 5]> {
        let tape = Tape::inference();
        let mut h = self.init.forward(&tape, tape.constant(Tensor::row(feature))).tanh();
        let mut prev = START_ROW;
        let mut out = Vec::new();
        for _ in 0..max_len {
            h = self.cell.step(&tape, tape.constant(Tensor::row(&prev)), h);
            let y = self.out.forward(&tape, h).value().into_data();
            let pen = (0..3).max_by(|&a, &b| y[2 + a].total_cmp(&y[2 + b])).unwrap_or(0);
            let mut row = [y[0].clamp(0.0, 1.0), y[1].clamp(0.0, 1.0), 0.0, 0.0, 0.0];
            row[2 + pen] = 1.0;
            out.push(row);
            prev = row;
            if pen == PenState::End.index() {
                break;
            }
        }
        out
    }
}

impl Module for VectorDecoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.init.params();
        v.extend(self.cell.params());
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.init.params_mut();
        v.extend(self.cell.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// Dense decoder from a feature to canvas intensities.
#[derive(Debug, Clone)]
pub struct RasterDecoder {
    pub hidden: Linear,
    pub out: Linear,
    size: usize,
}

impl RasterDecoder {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, hidden: usize, size: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(&format!("{name}.hidden"), dim, hidden, rng),
            out: Linear::new(&format!("{name}.out"), hidden, size * size, rng),
            size,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, feature: Var<'t>) -> Var<'t> {
        self.out.forward(tape, self.hidden.forward(tape, feature).tanh()).sigmoid()
    }

    pub fn decode(&self, feature: &[f64]) -> RasterCanvas {
        let tape = Tape::inference();
        let v = self.forward(&tape, tape.constant(Tensor::row(feature))).value().into_data();
        RasterCanvas::from_data(self.size, self.size, v).expect("decoder output size")
    }
}

impl Module for RasterDecoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub enum PretextDecoder {
    Vector(VectorDecoder),
    Raster(RasterDecoder),
}

impl Module for PretextDecoder {
    fn params(&self) -> Vec<&Param> {
        match self {
            Self::Vector(d) => d.params(),
            Self::Raster(d) => d.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Self::Vector(d) => d.params_mut(),
            Self::Raster(d) => d.params_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub task: PretextTask,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_len: usize,
    pub hidden: usize,
    pub encoder: RasterEncoderConfig,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            task: PretextTask::Vectorization,
            epochs: 40,
            batch: 16,
            lr: 2e-3,
            max_len: 100,
            hidden: 64,
            encoder: RasterEncoderConfig::default(),
            seed: 0,
        }
    }
}

/// Pretext loss of one sample.
pub fn pretext_loss<'t>(
    tape: &'t Tape,
    enc: &PretextEncoder,
    dec: &PretextDecoder,
    x: &UnlabelledSketch,
    max_len: usize,
) -> Result<Var<'t>> {
    let f = enc.forward(tape, x, max_len)?;
    match dec {
        PretextDecoder::Vector(d) => {
            let target = point_rows(&x.sketch, max_len);
            let pred = d.teacher_forced(tape, f, &target)?;
            let (c, p) = vectorization_loss_parts(tape, pred, &target)?;
            Ok(c.add(p))
        }
        PretextDecoder::Raster(d) => {
            let target = tape.constant(Tensor::row(x.canvas.data()));
            Ok(d.forward(tape, f).squared_error(target))
        }
    }
}

pub struct PretextOutcome {
    pub encoder: PretextEncoder,
    pub decoder: PretextDecoder,
    pub losses: Vec<f64>,
}

/// Trains encoder and decoder on the pretext task.
pub fn pretrain(data: &[UnlabelledSketch], cfg: &PretextConfig) -> Result<PretextOutcome> {
    let mut init = rng::stream(cfg.seed, &[60]);
    let mut encoder = PretextEncoder::new(cfg.task, cfg, &mut init);
    let mut decoder = match cfg.task {
        PretextTask::Vectorization => PretextDecoder::Vector(VectorDecoder::new("pretext.dec", encoder.dim(), cfg.hidden, &mut init)),
        PretextTask::Rasterization => PretextDecoder::Raster(RasterDecoder::new(
            "pretext.dec",
            encoder.dim(),
            cfg.hidden,
            cfg.encoder.canvas,
            &mut init,
        )),
    };
    let mut opt_e = Adam::new(cfg.lr);
    let mut opt_d = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, &[61]);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let tape = Tape::new();
            let terms: Vec<Var<'_>> = chunk
                .iter()
                .map(|&i| pretext_loss(&tape, &encoder, &decoder, &data[i], cfg.max_len))
                .collect::<Result<_>>()?;
            let loss = concat_rows(&terms).mean();
            let grads = tape.backward(loss)?;
            encoder.zero_grad();
            encoder.accumulate(&grads);
            decoder.zero_grad();
            decoder.accumulate(&grads);
            autodiff::clip_grad_norm(encoder.params_mut(), 1.0);
            autodiff::clip_grad_norm(decoder.params_mut(), 1.0);
            opt_e.step_module(&mut encoder)?;
            opt_d.step_module(&mut decoder)?;
            total += loss.item() * chunk.len() as f64;
        }
        let mean = total / data.len().max(1) as f64;
        log::debug!("pretext epoch {epoch}: {mean:.5}");
        losses.push(mean);
    }
    Ok(PretextOutcome {
        encoder,
        decoder,
        losses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    LinearFrozen,
    /// Fine-tune encoder and head on a fraction of the labelled data.
    FinetuneFraction { frac: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearEvalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub mode: EvalMode,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            mode: EvalMode::LinearFrozen,
            max_len: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
}

/// A labelled input for evaluation only.
#[derive(Clone, Debug)]
pub struct LabelledSketch {
    pub input: UnlabelledSketch,
    pub label: usize,
}

fn topk_hits(scores: &[f64], label: usize, k: usize) -> bool {
    let s = scores[label];
    scores.iter().filter(|&&v| v > s).count() < k
}

/// Trains a dense softmax head (and the encoder when fine-tuning) and
/// reports test accuracy.
pub fn linear_eval(encoder: &PretextEncoder, train: &[LabelledSketch], test: &[LabelledSketch], cfg: &LinearEvalConfig) -> Result<EvalResult> {
    if train.is_empty() || test.is_empty() {
        return Err(SketchError::InvalidArgument("evaluation needs train and test data".into()));
    }
    let classes = train.iter().chain(test).map(|x| x.label).max().unwrap_or(0) + 1;
    let mut init = rng::stream(cfg.seed, &[62]);
    let mut head = Linear::new("eval.head", encoder.dim(), classes, &mut init);
    let mut opt_h = Adam::new(cfg.lr);
    let subset: Vec<&LabelledSketch> = match cfg.mode {
        EvalMode::LinearFrozen => train.iter().collect(),
        EvalMode::FinetuneFraction { frac } => {
            if !(frac > 0.0 && frac <= 1.0) {
                return Err(SketchError::InvalidArgument("fine-tune fraction must lie in (0, 1]".into()));
            }
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut init);
            let n = ((train.len() as f64 * frac).ceil() as usize).max(1);
            idx[..n].iter().map(|&i| &train[i]).collect()
        }
    };
    let labels: Vec<usize> = subset.iter().map(|x| x.label).collect();
    let mut enc = encoder.clone();
    match cfg.mode {
        EvalMode::LinearFrozen => {
            let feats: Vec<Vec<f64>> = subset
                .par_iter()
                .map(|x| enc.features(&x.input, cfg.max_len))
                .collect::<Result<_>>()?;
            let x = Tensor::from_rows(&feats)?;
            for _ in 0..cfg.epochs {
                let tape = Tape::new();
                let loss = head.forward(&tape, tape.constant(x.clone())).cross_entropy(&labels);
                let grads = tape.backward(loss)?;
                head.zero_grad();
                head.accumulate(&grads);
                opt_h.step_module(&mut head)?;
            }
        }
        EvalMode::FinetuneFraction { .. } => {
            let mut opt_e = Adam::new(cfg.lr * 0.1);
            for _ in 0..cfg.epochs {
                let tape = Tape::new();
                let feats: Vec<Var<'_>> = subset
                    .iter()
                    .map(|x| enc.forward(&tape, &x.input, cfg.max_len))
                    .collect::<Result<_>>()?;
                let loss = head.forward(&tape, concat_rows(&feats)).cross_entropy(&labels);
                let grads = tape.backward(loss)?;
                head.zero_grad();
                head.accumulate(&grads);
                enc.zero_grad();
                enc.accumulate(&grads);
                opt_h.step_module(&mut head)?;
                opt_e.step_module(&mut enc)?;
            }
        }
    }
    let hits: Vec<(bool, bool)> = test
        .par_iter()
        .map(|x| {
            let f = enc.features(&x.input, cfg.max_len)?;
            let s = head.apply(&Tensor::row(&f)).into_data();
            Ok((topk_hits(&s, x.label, 1), topk_hits(&s, x.label, 5)))
        })
        .collect::<Result<_>>()?;
    let n = hits.len() as f64;
    Ok(EvalResult {
        top1: hits.iter().filter(|h| h.0).count() as f64 / n,
        top5: hits.iter().filter(|h| h.1).count() as f64 / n,
    })
}

/// Attaches labels for evaluation.
pub fn labelled_view(instances: &[SyntheticInstance], line_width: usize) -> Result<Vec<LabelledSketch>> {
    Ok(unlabelled_view(instances, line_width)?
        .into_iter()
        .zip(instances)
        .map(|(input, i)| LabelledSketch { input, label: i.class_id })
        .collect())
}
