//! Interactive retrieval sessions. The service and the offline replay both
//! go through [`ServiceModels`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sketchlab::metrics::{normalize, ranking_percentile, Gallery};
use sketchlab::models::{GaussianPolicyHead, StrokeHierEncoder};
use sketchlab::otf::{rollout_states, ActionMode};
use sketchlab::retrieval::RetrievalModel;
use sketchlab::select::retrievability_score;
use sketchlab::sketch::{rdp_simplify, RasterCanvas, SyntheticInstance, VectorSketch};
use sketchlab::{rng, SketchError};

use crate::error::Result;
use crate::store;

/// Simplification tolerance applied to every incoming stroke.
pub const RDP_EPSILON: f64 = 1e-3;
pub const MAX_STROKE_POINTS: usize = 1024;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrokeResponse {
    pub topk: Vec<u64>,
    /// Percentile of the session target, when one was given.
    pub rank_percentile: Option<f64>,
    pub rank: Option<usize>,
    pub retrievability: Option<f64>,
    pub stroke_select_prob: Vec<f64>,
}

/// Read-only state shared by every session.
pub struct ServiceModels {
    pub retrieval: RetrievalModel,
    pub policy: GaussianPolicyHead,
    pub selector: Option<StrokeHierEncoder>,
    pub gallery: Gallery,
    pub photos: Vec<(u64, RasterCanvas)>,
    pub k: usize,
}

/// Validates raw pointer samples and simplifies them.
pub fn ingest_stroke(points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, SketchError> {
    if points.len() < 2 {
        return Err(SketchError::InvalidSketch("a stroke needs at least 2 points".into()));
    }
    if points.len() > MAX_STROKE_POINTS {
        return Err(SketchError::InvalidSketch(format!("a stroke has at most {MAX_STROKE_POINTS} points")));
    }
    if let Some(p) = points.iter().find(|p| !p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))) {
        return Err(SketchError::InvalidSketch(format!("point {p:?} outside the unit square")));
    }
    Ok(rdp_simplify(points, RDP_EPSILON))
}

impl ServiceModels {
    pub fn new(retrieval: RetrievalModel, policy: Option<GaussianPolicyHead>, selector: Option<StrokeHierEncoder>, gallery_set: &[SyntheticInstance], k: usize) -> Result<Self> {
        let policy = policy.unwrap_or_else(|| GaussianPolicyHead::from_projection("otf.policy", &retrieval.sketch.head));
        let gallery = retrieval.gallery_of(gallery_set)?;
        Ok(Self {
            retrieval,
            policy,
            selector,
            gallery,
            photos: gallery_set.iter().map(|i| (i.instance_id, i.photo.clone())).collect(),
            k,
        })
    }

    /// Loads `retrieval.ckpt` and, when present, `otf_policy.ckpt` and
    /// `selector.ckpt` from `dir`.
    pub fn load(dir: &Path, gallery_set: &[SyntheticInstance], k: usize) -> Result<Self> {
        let retrieval = store::load_retrieval(&dir.join(store::RETRIEVAL))?;
        let optional = |name: &str| Some(dir.join(name)).filter(|p| p.is_file());
        let policy = optional(store::POLICY).map(|p| store::load_policy(&p)).transpose()?;
        let selector = optional(store::SELECTOR).map(|p| store::load_selector(&p)).transpose()?;
        Self::new(retrieval, policy, selector, gallery_set, k)
    }

    pub fn photo(&self, instance_id: u64) -> Option<&RasterCanvas> {
        self.photos.iter().find(|(id, _)| *id == instance_id).map(|(_, p)| p)
    }

    pub fn state(&self, sketch: &VectorSketch) -> Result<Vec<f64>> {
        Ok(self.retrieval.sketch.state_plain(&self.retrieval.rasterize(sketch)?)?)
    }

    fn selector_fields(&self, sketch: &VectorSketch) -> Result<(Option<f64>, Vec<f64>)> {
        match &self.selector {
            Some(s) => Ok((Some(retrievability_score(sketch, s)?), s.select_probs(sketch)?)),
            None => Ok((None, Vec::new())),
        }
    }

    /// Response for the whole accumulated sketch.
    pub fn respond(&self, sketch: &VectorSketch, target: Option<u64>) -> Result<StrokeResponse> {
        let query = normalize(&self.policy.mean_plain(&self.state(sketch)?));
        let topk = self.gallery.top_k(&query, self.k);
        let rank = target.map(|t| self.gallery.rank_of(&query, t).map(|r| r.0)).transpose()?;
        let (retrievability, stroke_select_prob) = self.selector_fields(sketch)?;
        Ok(StrokeResponse {
            topk,
            rank_percentile: rank.map(|r| ranking_percentile(r, self.gallery.len())),
            rank,
            retrievability,
            stroke_select_prob,
        })
    }

    /// Replays a stroke sequence offline: per-stroke states go through the
    /// deterministic rollout and the remaining fields through the selector.
    pub fn offline_trace(&self, strokes: &[Vec<[f64; 2]>], target: Option<u64>) -> Result<Vec<StrokeResponse>> {
        let mut prefixes = Vec::with_capacity(strokes.len());
        let mut sketch = VectorSketch::empty();
        for s in strokes {
            sketch = sketch.push_stroke(ingest_stroke(s)?)?;
            prefixes.push(sketch.clone());
        }
        let states: Vec<Vec<f64>> = prefixes.iter().map(|p| self.state(p)).collect::<Result<_>>()?;
        let ranks: Vec<Option<usize>> = match target {
            Some(t) => {
                let tr = rollout_states(t, &states, &self.policy, &self.gallery, ActionMode::Mean, &mut rng::stream(0, &[]))?;
                tr.ranks().into_iter().map(Some).collect()
            }
            None => vec![None; states.len()],
        };
        prefixes
            .iter()
            .zip(&states)
            .zip(ranks)
            .map(|((p, s), rank)| {
                let query = normalize(&self.policy.mean_plain(s));
                let (retrievability, stroke_select_prob) = self.selector_fields(p)?;
                Ok(StrokeResponse {
                    topk: self.gallery.top_k(&query, self.k),
                    rank_percentile: rank.map(|r| ranking_percentile(r, self.gallery.len())),
                    rank,
                    retrievability,
                    stroke_select_prob,
                })
            })
            .collect()
    }
}

/// One user's drawing. Each response is stored so undo can restore the
/// previous one.
#[derive(Clone, Debug, Default)]
pub struct Session {
    pub target: Option<u64>,
    pub sketch: VectorSketch,
    pub history: Vec<StrokeResponse>,
}

impl Session {
    pub fn new(target: Option<u64>) -> Self {
        Self {
            target,
            ..Default::default()
        }
    }

    pub fn add_stroke(&mut self, models: &ServiceModels, points: &[[f64; 2]]) -> Result<StrokeResponse> {
        let next = self.sketch.push_stroke(ingest_stroke(points)?)?;
        let resp = models.respond(&next, self.target)?;
        self.sketch = next;
        self.history.push(resp.clone());
        Ok(resp)
    }

    /// Removes the last stroke; `None` when there is nothing to undo.
    pub fn undo(&mut self) -> Option<StrokeResponse> {
        self.history.pop()?;
        self.sketch = self.sketch.pop_stroke();
        Some(self.history.last().cloned().unwrap_or_default())
    }
}
