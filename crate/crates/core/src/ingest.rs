//! Interaction logs, modal feature sets, dataset statistics and the
//! planted-block synthetic generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::DenseMat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Interaction records over dense user and item ids.
///
/// Records are kept sorted by `(user, timestamp, item)` with exact
/// duplicates removed, so two logs holding the same set of records are
/// equal no matter how they were assembled.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InteractionLog {
    n_users: usize,
    n_items: usize,
    records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(n_users: usize, n_items: usize, mut records: Vec<Interaction>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.user >= n_users || r.item >= n_items) {
            return Err(Error::invalid(format!(
                "record (user {}, item {}) outside {n_users} users x {n_items} items",
                r.user, r.item
            )));
        }
        records.sort_by_key(|r| (r.user, r.timestamp, r.item));
        records.dedup();
        Ok(InteractionLog {
            n_users,
            n_items,
            records,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Each user's records in chronological order; ties broken by item id.
    pub fn user_histories(&self) -> Vec<&[Interaction]> {
        let mut out: Vec<&[Interaction]> = vec![&[]; self.n_users];
        let mut start = 0;
        while start < self.records.len() {
            let u = self.records[start].user;
            let mut end = start;
            while end < self.records.len() && self.records[end].user == u {
                end += 1;
            }
            out[u] = &self.records[start..end];
            start = end;
        }
        out
    }
}

/// Precomputed raw features of one modality, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalFeatureSet {
    modality: String,
    features: DenseMat,
}

impl ModalFeatureSet {
    pub fn new(modality: impl Into<String>, features: DenseMat) -> Result<Self> {
        if let Some((row, col)) = features.first_non_finite() {
            return Err(Error::NonFinite {
                what: "modal feature",
                row,
                col,
            });
        }
        Ok(ModalFeatureSet {
            modality: modality.into(),
            features,
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn features(&self) -> &DenseMat {
        &self.features
    }

    pub fn n_items(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn expect_items(&self, expected: usize) -> Result<()> {
        if self.n_items() != expected {
            return Err(Error::ItemCountMismatch {
                expected,
                found: self.n_items(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// `1 − interactions / (users · items)`; 1.0 for an empty catalog.
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn sparsity_percent(&self) -> f64 {
        self.sparsity * 100.0
    }
}

pub fn dataset_stats(log: &InteractionLog) -> DatasetStats {
    let cells = log.n_users() as f64 * log.n_items() as f64;
    let sparsity = if cells == 0.0 {
        1.0
    } else {
        1.0 - log.len() as f64 / cells
    };
    DatasetStats {
        users: log.n_users(),
        items: log.n_items(),
        interactions: log.len(),
        sparsity,
    }
}

/// Parameters of the planted-block generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockModel {
    pub n_users: usize,
    pub n_items: usize,
    pub n_blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl BlockModel {
    /// The 60-user, 40-item, 4-block toy used throughout the test suites.
    pub fn toy(seed: u64) -> Self {
        BlockModel {
            n_users: 60,
            n_items: 40,
            n_blocks: 4,
            p_in: 0.3,
            p_out: 0.01,
            feat_dim: 8,
            noise: 0.1,
            seed,
        }
    }

    pub fn user_block(&self, u: usize) -> usize {
        u / (self.n_users / self.n_blocks)
    }

    pub fn item_block(&self, i: usize) -> usize {
        i / (self.n_items / self.n_blocks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub log: InteractionLog,
    pub text: ModalFeatureSet,
    pub visual: ModalFeatureSet,
}

/// Users and items split into aligned blocks; each user–item pair is an
/// interaction with probability `p_in` inside the user's block and `p_out`
/// elsewhere. Item features in each modality are the block centroid plus
/// Gaussian noise of standard deviation `noise`.
pub fn synth_block_model(p: &BlockModel) -> Result<SyntheticDataset> {
    let probs_ok = (0.0..=1.0).contains(&p.p_in) && p.p_out >= 0.0 && p.p_out < p.p_in;
    if !probs_ok {
        return Err(Error::invalid(format!(
            "block model probabilities need 0 <= p_out < p_in <= 1, got p_in={}, p_out={}",
            p.p_in, p.p_out
        )));
    }
    if p.n_blocks == 0 || !p.n_users.is_multiple_of(p.n_blocks) || !p.n_items.is_multiple_of(p.n_blocks) {
        return Err(Error::invalid(format!(
            "{} blocks must divide {} users and {} items",
            p.n_blocks, p.n_users, p.n_items
        )));
    }
    if p.noise < 0.0 || !p.noise.is_finite() {
        return Err(Error::invalid("feature noise must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut records = Vec::new();
    for u in 0..p.n_users {
        let mut items: Vec<usize> = (0..p.n_items)
            .filter(|&i| {
                let prob = if p.user_block(u) == p.item_block(i) {
                    p.p_in
                } else {
                    p.p_out
                };
                rng.random::<f64>() < prob
            })
            .collect();
        items.shuffle(&mut rng);
        for (rank, item) in items.into_iter().enumerate() {
            // Distinct hour slots keep per-user timestamps unique.
            let timestamp = 1_500_000_000 + rank as i64 * 3600 + rng.random_range(0..3600);
            records.push(Interaction {
                user: u,
                item,
                timestamp,
            });
        }
    }
    let log = InteractionLog::new(p.n_users, p.n_items, records)?;
    let mut modality = |name: &str| -> Result<ModalFeatureSet> {
        let centroids = DenseMat::from_fn(p.n_blocks, p.feat_dim, |_, _| {
            StandardNormal.sample(&mut rng)
        });
        let feats = DenseMat::from_fn(p.n_items, p.feat_dim, |i, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            centroids.get(p.item_block(i), c) + p.noise * z
        });
        ModalFeatureSet::new(name, feats)
    };
    let text = modality("text")?;
    let visual = modality("visual")?;
    Ok(SyntheticDataset { log, text, visual })
}
