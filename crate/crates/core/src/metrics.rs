//! Retrieval and continual-learning metrics.

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::similarity::{cross_sim, encode_texts, encode_videos};

/// 1-based rank of the true gallery item for each query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankList {
    pub ranks: Vec<usize>,
}

/// Summary retrieval metrics of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub meanr: f64,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &RankList) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
            medr: median_rank(ranks)?,
            meanr: mean_rank(ranks)?,
        })
    }
}

/// Ranks from a `queries x gallery` score matrix. The gallery is ordered by
/// descending score; equal scores keep ascending gallery index.
pub fn rank_from_scores(scores: &Tensor, truth: &[usize]) -> Result<RankList> {
    if scores.rows() != truth.len() {
        return Err(Error::BatchSizeMismatch(scores.rows(), truth.len()));
    }
    let g = scores.cols();
    let ranks = truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            if t >= g {
                return Err(Error::TruthNotInGallery(q));
            }
            let row = scores.row(q);
            let target = row[t];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < t))
                .count();
            Ok(ahead + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankList { ranks })
}

/// Ranks each raw text query against the raw video gallery under `state`.
/// `truth[q]` is the gallery index of the video paired with query `q`.
pub fn rank_queries(
    queries: &[&Tensor],
    gallery: &[&Tensor],
    truth: &[usize],
    state: &ModelState,
) -> Result<RankList> {
    if let Some(q) = truth.iter().position(|&t| t >= gallery.len()) {
        return Err(Error::TruthNotInGallery(q));
    }
    if queries.is_empty() {
        return Ok(RankList { ranks: Vec::new() });
    }
    let words = encode_texts(queries, state)?;
    let frames = encode_videos(gallery, state)?;
    rank_from_scores(&cross_sim(&words, &frames)?, truth)
}

fn nonempty(ranks: &RankList) -> Result<&[usize]> {
    if ranks.ranks.is_empty() {
        Err(Error::EmptyRankList)
    } else {
        Ok(&ranks.ranks)
    }
}

/// Percentage of queries whose rank is at most `k`.
pub fn recall_at_k(ranks: &RankList, k: usize) -> Result<f64> {
    let r = nonempty(ranks)?;
    if k == 0 {
        return Err(Error::InvalidConfig("recall cutoff must be >= 1".into()));
    }
    Ok(100.0 * r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

pub fn median_rank(ranks: &RankList) -> Result<f64> {
    let mut r = nonempty(ranks)?.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

pub fn mean_rank(ranks: &RankList) -> Result<f64> {
    let r = nonempty(ranks)?;
    Ok(r.iter().sum::<usize>() as f64 / r.len() as f64)
}

/// Backward forgetting after task `k` (1-based) from a lower-triangular
/// recall matrix where `recall[k-1][i-1]` is the score on task `i` after
/// training task `k`.
pub fn bwf(recall: &[Vec<f64>], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InsufficientTasks(k));
    }
    if recall.len() < k || (0..k).any(|j| recall[j].len() <= j) {
        return Err(Error::ShapeMismatch(format!(
            "recall matrix does not cover {k} tasks"
        )));
    }
    let drops: f64 = (0..k - 1).map(|i| recall[i][i] - recall[k - 1][i]).sum();
    Ok(drops / (k - 1) as f64)
}
