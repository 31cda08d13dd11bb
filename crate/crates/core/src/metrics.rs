//! Gallery ranking and evaluation metrics.

use std::collections::HashSet;

use autodiff::Var;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SketchError};

/// Row-wise l2 normalisation with the same floor as the tape op.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Candidate embeddings with their instance identities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    embeddings: Vec<Vec<f64>>,
    ids: Vec<u64>,
}

/// Gallery indices sorted by ascending distance, ties by lower index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankList(pub Vec<usize>);

impl RankList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `pos[i]` is the position of gallery index `i`.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![usize::MAX; self.0.len()];
        for (p, &i) in self.0.iter().enumerate() {
            if i < pos.len() {
                pos[i] = p;
            }
        }
        pos
    }

    pub fn is_permutation(&self) -> bool {
        let pos = self.positions();
        pos.iter().all(|&p| p != usize::MAX)
    }
}

impl Gallery {
    pub fn new(embeddings: Vec<Vec<f64>>, ids: Vec<u64>) -> Result<Self> {
        if embeddings.len() != ids.len() {
            return Err(SketchError::InvalidArgument(format!(
                "gallery has {} embeddings and {} ids",
                embeddings.len(),
                ids.len()
            )));
        }
        if embeddings.is_empty() {
            return Err(SketchError::InvalidArgument("empty gallery".into()));
        }
        let d = embeddings[0].len();
        for e in &embeddings {
            if e.len() != d {
                return Err(SketchError::DimensionMismatch {
                    expected: [1, d],
                    got: [1, e.len()],
                });
            }
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(SketchError::InvalidArgument(format!("gallery row norm {n}")));
            }
        }
        let unique: HashSet<u64> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(SketchError::InvalidArgument("duplicate gallery ids".into()));
        }
        Ok(Self { embeddings, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    pub fn index_of(&self, id: u64) -> Result<usize> {
        self.ids
            .iter()
            .position(|&x| x == id)
            .ok_or(SketchError::MissingInstance(id))
    }

    pub fn distances(&self, query: &[f64]) -> Vec<f64> {
        self.embeddings.iter().map(|e| euclidean(query, e)).collect()
    }

    pub fn rank_list(&self, query: &[f64]) -> RankList {
        rank_list_from_distances(&self.distances(query))
    }

    /// 1-based rank of `true_id` for `query`, and the full rank list.
    pub fn rank_of(&self, query: &[f64], true_id: u64) -> Result<(usize, RankList)> {
        if query.len() != self.dim() {
            return Err(SketchError::DimensionMismatch {
                expected: [1, self.dim()],
                got: [1, query.len()],
            });
        }
        let t = self.index_of(true_id)?;
        let d = self.distances(query);
        Ok((rank_from_distances(&d, t), rank_list_from_distances(&d)))
    }

    /// Instance ids of the `k` nearest items.
    pub fn top_k(&self, query: &[f64], k: usize) -> Vec<u64> {
        self.rank_list(query).0.iter().take(k).map(|&i| self.ids[i]).collect()
    }
}

pub fn rank_list_from_distances(d: &[f64]) -> RankList {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    RankList(idx)
}

/// Pessimistic rank: the true item comes after everything strictly closer
/// and after every other item at the same distance.
pub fn rank_from_distances(d: &[f64], true_idx: usize) -> usize {
    let dt = d[true_idx];
    1 + d
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != true_idx && v <= dt)
        .count()
}

/// Fraction of ranks at most `q`.
pub fn acc_at_q(ranks: &[usize], q: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(SketchError::InvalidArgument("acc_at_q over no ranks".into()));
    }
    if q == 0 {
        return Err(SketchError::InvalidArgument("q must be at least 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= q).count() as f64 / ranks.len() as f64)
}

/// `(M − rank)/(M − 1)` in `[0, 1]`; a one-item gallery scores 1.
pub fn ranking_percentile(rank: usize, m: usize) -> f64 {
    if m <= 1 {
        1.0
    } else {
        (m - rank) as f64 / (m - 1) as f64
    }
}

/// Normalised Kendall-Tau distance between two rank lists.
pub fn kendall_tau_norm(a: &RankList, b: &RankList) -> Result<f64> {
    let n = a.len();
    if n != b.len() || n < 2 || !a.is_permutation() || !b.is_permutation() {
        return Err(SketchError::InvalidArgument(
            "kendall tau needs two permutations of the same n ≥ 2 indices".into(),
        ));
    }
    let pos_b = b.positions();
    let mut seq: Vec<usize> = a.0.iter().map(|&i| pos_b[i]).collect();
    let discordant = count_inversions(&mut seq);
    Ok(discordant as f64 / (n * (n - 1) / 2) as f64)
}

fn count_inversions(v: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            inv += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    inv
}

/// Per-step ranking percentile (×100) and inverse rank over an episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCurve {
    pub rp: Vec<f64>,
    pub inv_rank: Vec<f64>,
}

impl EpisodeCurve {
    pub fn from_ranks(ranks: &[usize], m: usize) -> Self {
        let mut c = Self::default();
        for &r in ranks {
            c.push(r, m);
        }
        c
    }

    pub fn push(&mut self, rank: usize, m: usize) {
        self.rp.push(100.0 * ranking_percentile(rank, m));
        self.inv_rank.push(1.0 / rank as f64);
    }

    pub fn len(&self) -> usize {
        self.rp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rp.is_empty()
    }

    /// Percentiles on the `[0, 1]` scale.
    pub fn unit_rp(&self) -> Vec<f64> {
        self.rp.iter().map(|v| v / 100.0).collect()
    }
}

/// `(m@A, m@B)`: means of the percentile and inverse-rank curves.
pub fn episode_metrics(curve: &EpisodeCurve) -> Result<(f64, f64)> {
    if curve.is_empty() || curve.rp.len() != curve.inv_rank.len() {
        return Err(SketchError::InvalidArgument("episode curve needs T ≥ 1 aligned steps".into()));
    }
    let t = curve.len() as f64;
    Ok((curve.rp.iter().sum::<f64>() / t, curve.inv_rank.iter().sum::<f64>() / t))
}

/// Mean magnitude of percentile drops, percentiles in `[0, 1]`.
pub fn stroke_backlash(rp: &[f64]) -> Result<f64> {
    if rp.len() < 2 {
        return Err(SketchError::InvalidArgument("stroke backlash needs T ≥ 2".into()));
    }
    let drops: f64 = rp.windows(2).map(|w| (w[1] - w[0]).min(0.0).abs()).sum();
    Ok(drops / (rp.len() - 1) as f64)
}

/// `max(0, μ + ‖a − p‖ − ‖a − n‖)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (margin + euclidean(anchor, positive) - euclidean(anchor, negative)).max(0.0)
}

/// Euclidean distance between rows on the tape. A tiny offset under the root
/// keeps the gradient finite at coincident points.
pub fn distance_var<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.sub(b).square().sum_cols().add_scalar(1e-12).sqrt()
}

/// Differentiable triplet loss, averaged over rows.
pub fn triplet_loss_var<'t>(anchor: Var<'t>, positive: Var<'t>, negative: Var<'t>, margin: f64) -> Var<'t> {
    distance_var(anchor, positive)
        .sub(distance_var(anchor, negative))
        .add_scalar(margin)
        .relu()
        .mean()
}

/// Acc@1, Acc@5, Acc@10 over a set of ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccSummary {
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
}

impl AccSummary {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            acc1: acc_at_q(ranks, 1)?,
            acc5: acc_at_q(ranks, 5)?,
            acc10: acc_at_q(ranks, 10)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inversions_match_pairs() {
        let mut v = vec![3, 1, 2, 0];
        assert_eq!(count_inversions(&mut v), 5);
        assert_eq!(v, vec![0, 1, 2, 3]);
    }
}
