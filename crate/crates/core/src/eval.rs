//! Leave-last-out splitting and full-catalog ranking metrics.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ingest::{Interaction, InteractionLog};
use crate::math;

/// Per-user chronological split: last interaction is the test item, the
/// one before it the validation item, everything earlier is training.
/// Users with fewer than three interactions stay entirely in training and
/// are not evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: InteractionLog,
    pub valid: BTreeMap<usize, usize>,
    pub test: BTreeMap<usize, usize>,
}

impl SplitSet {
    /// Training items of every user in chronological order.
    pub fn train_sequences(&self) -> Vec<Vec<usize>> {
        self.train
            .user_histories()
            .into_iter()
            .map(|h| h.iter().map(|r| r.item).collect())
            .collect()
    }

    /// Sorted training items per user, for ranking exclusion.
    pub fn train_items(&self) -> Vec<Vec<usize>> {
        let mut seqs = self.train_sequences();
        for s in &mut seqs {
            s.sort_unstable();
            s.dedup();
        }
        seqs
    }
}

pub fn leave_last_out_split(log: &InteractionLog) -> SplitSet {
    let mut train: Vec<Interaction> = Vec::with_capacity(log.len());
    let mut valid = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (user, hist) in log.user_histories().into_iter().enumerate() {
        if hist.len() < 3 {
            train.extend_from_slice(hist);
            continue;
        }
        let n = hist.len();
        test.insert(user, hist[n - 1].item);
        valid.insert(user, hist[n - 2].item);
        train.extend_from_slice(&hist[..n - 2]);
    }
    SplitSet {
        train: InteractionLog::new(log.n_users(), log.n_items(), train)
            .expect("subset of a valid log"),
        valid,
        test,
    }
}

/// Item indices sorted by descending score, ties to the lower index,
/// with the (sorted) `exclude` items removed. At most `keep` items are
/// returned.
pub fn rank_items(scores: &[f64], exclude: &[usize], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if keep < idx.len() {
        if keep > 0 {
            idx.select_nth_unstable_by(keep - 1, cmp);
        }
        idx.truncate(keep);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Recall@K and NDCG@K for each requested cutoff, averaged over users.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMetrics {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
}

impl RankMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }
}

/// 1-based position of `truth` in `ranking`.
pub fn truth_rank(ranking: &[usize], truth: usize) -> Option<usize> {
    ranking.iter().position(|&i| i == truth).map(|p| p + 1)
}

/// Single-truth metrics: a hit at 1-based rank `r ≤ K` scores recall 1 and
/// gain `1 / log₂(r + 1)`; misses score 0. Every user in `truths` must have
/// a ranking.
pub fn rank_metrics(
    rankings: &BTreeMap<usize, Vec<usize>>,
    truths: &BTreeMap<usize, usize>,
    ks: &[usize],
) -> Result<RankMetrics> {
    let mut recall = alloc::vec![0.0; ks.len()];
    let mut ndcg = alloc::vec![0.0; ks.len()];
    for (&user, &truth) in truths {
        let ranking = rankings.get(&user).ok_or(Error::MissingRanking(user))?;
        if let Some(r) = truth_rank(ranking, truth) {
            for (j, &k) in ks.iter().enumerate() {
                if r <= k {
                    recall[j] += 1.0;
                    ndcg[j] += 1.0 / math::log2(r as f64 + 1.0);
                }
            }
        }
    }
    let n = truths.len();
    if n > 0 {
        for v in recall.iter_mut().chain(ndcg.iter_mut()) {
            *v /= n as f64;
        }
    }
    Ok(RankMetrics {
        ks: ks.to_vec(),
        recall,
        ndcg,
        users: n,
    })
}
