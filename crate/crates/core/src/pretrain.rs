//! Recommender pretraining: BPR plus the two hypergraph-vs-fused
//! contrastive terms and an L2 penalty, optimized with Adam.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{self, BipartiteGraph};
use crate::error::{Error, Result};
use crate::eval::{rank_items, rank_metrics, RankMetrics};
use crate::hypergraph::{self, HypergraphOperator, Incidence};
use crate::ingest::{InteractionLog, ModalFeatureSet};
use crate::numerics::{Adam, AdamConfig, DenseMat, NORM_EPS, ParamId, ParamSet, SparseCsr, Tape, Var};

/// Which rows form the contrastive denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeScope {
    /// Every user (item) in the catalog.
    Full,
    /// Only the users (items) appearing in the current batch.
    InBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// Weight of the user-side contrastive loss.
    pub alpha: f64,
    /// Weight of the item-side contrastive loss.
    pub beta: f64,
    /// L2 coefficient on all embedding tables.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub dim: usize,
    /// Neighbours per item in each modality graph.
    pub knn_k: usize,
    /// Hypergraph convolution layers.
    pub layers: usize,
    pub lightgcn_layers: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub negatives: NegativeScope,
    pub use_u2u: bool,
    pub use_i2i: bool,
    /// Learn a diagonal layer transform per side; identity when off.
    pub trainable_transform: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            alpha: 0.1,
            beta: 0.1,
            lambda: 1e-3,
            tau: 0.5,
            lr: 1e-4,
            batch_size: 1024,
            dim: 64,
            knn_k: 5,
            layers: 2,
            lightgcn_layers: 2,
            max_epochs: 1000,
            patience: 20,
            seed: 0,
            negatives: NegativeScope::Full,
            use_u2u: true,
            use_i2i: true,
            trainable_transform: false,
        }
    }
}

impl PretrainConfig {
    /// Every violated constraint, or an empty list.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau > 0.0) {
            v.push(format!("tau must be > 0, got {}", self.tau));
        }
        for (name, x) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(x >= 0.0) || !x.is_finite() {
                v.push(format!("{name} must be finite and >= 0, got {x}"));
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            v.push(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if self.dim == 0 {
            v.push("dim must be >= 1".into());
        }
        if self.knn_k == 0 {
            v.push("knn_k must be >= 1".into());
        }
        v
    }
}

/// Precomputed sparse structure consumed by pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainGraphs {
    pub interactions: Incidence,
    pub bipartite: BipartiteGraph,
    pub u2u: Option<HypergraphOperator>,
    pub i2i: Option<HypergraphOperator>,
}

impl PretrainGraphs {
    /// Builds `A`, `Â`, the user operator and, when modalities are given,
    /// the item operator from KNN graphs with `knn_k` neighbours.
    pub fn build(
        train: &InteractionLog,
        modalities: &[ModalFeatureSet],
        knn_k: usize,
        lightgcn_layers: usize,
    ) -> Result<Self> {
        let a = hypergraph::build_interaction_matrix(train);
        let u2u = hypergraph::build_hypergraph_operator(&a)?;
        let i2i = if modalities.is_empty() {
            None
        } else {
            let mut graphs = Vec::with_capacity(modalities.len());
            for m in modalities {
                m.expect_items(train.n_items())?;
                graphs.push(hypergraph::knn_modal_graph(m, knn_k)?.matrix);
            }
            let inc = hypergraph::concat_modalities(&graphs)?;
            Some(hypergraph::build_hypergraph_operator(&inc)?)
        };
        Ok(Self::from_parts(a, Some(u2u), i2i, lightgcn_layers))
    }

    pub fn from_parts(
        interactions: Incidence,
        u2u: Option<HypergraphOperator>,
        i2i: Option<HypergraphOperator>,
        lightgcn_layers: usize,
    ) -> Self {
        PretrainGraphs {
            bipartite: BipartiteGraph::new(&interactions, lightgcn_layers),
            interactions,
            u2u,
            i2i,
        }
    }

    pub fn users(&self) -> usize {
        self.interactions.matrix.rows()
    }

    pub fn items(&self) -> usize {
        self.interactions.matrix.cols()
    }

    /// Sorted training items of user `u`.
    pub fn train_items(&self, u: usize) -> &[usize] {
        self.interactions.matrix.row(u).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Draws `batch_size` triples: an observed `(u, i)` record uniformly at
/// random and an unobserved item `j` for that user uniformly by rejection.
/// Users who have interacted with every item are skipped and redrawn.
pub fn sample_bpr_triples<R: Rng + ?Sized>(
    train: &SparseCsr,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BprTriple>> {
    let nnz = train.nnz();
    let n_items = train.cols();
    if nnz == 0 {
        return Err(Error::invalid("no training interactions to sample from"));
    }
    if (0..train.rows()).all(|u| train.row_nnz(u) == 0 || train.row_nnz(u) == n_items) {
        return Err(Error::invalid("no user has an unobserved item to use as negative"));
    }
    let row_ptr = train.row_ptr();
    let mut warned = false;
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < batch_size {
        let r = rng.random_range(0..nnz);
        let user = row_ptr.partition_point(|&p| p <= r) - 1;
        if train.row_nnz(user) == n_items {
            if !warned {
                log::warn!("user {user} has observed every item; resampling");
                warned = true;
            }
            continue;
        }
        let pos = train.col_idx()[r];
        let neg = loop {
            let j = rng.random_range(0..n_items);
            if !train.contains(user, j) {
                break j;
            }
        };
        out.push(BprTriple { user, pos, neg });
    }
    Ok(out)
}

/// `Σ −ln σ(ŷ_ui − ŷ_uj)` over a full score matrix.
pub fn bpr_loss(triples: &[BprTriple], scores: &DenseMat) -> f64 {
    triples
        .iter()
        .map(|t| crate::math::softplus(scores.get(t.user, t.neg) - scores.get(t.user, t.pos)))
        .sum()
}

pub fn bpr_loss_tape(tape: &mut Tape<'_>, fused_user: Var, fused_item: Var, triples: &[BprTriple]) -> Result<Var> {
    let users: Vec<usize> = triples.iter().map(|t| t.user).collect();
    let pos: Vec<usize> = triples.iter().map(|t| t.pos).collect();
    let neg: Vec<usize> = triples.iter().map(|t| t.neg).collect();
    let u = tape.gather_rows(fused_user, &users)?;
    let i = tape.gather_rows(fused_item, &pos)?;
    let j = tape.gather_rows(fused_item, &neg)?;
    let si = tape.row_dot(u, i)?;
    let sj = tape.row_dot(u, j)?;
    let margin = tape.sub(sj, si)?;
    let l = tape.softplus(margin);
    Ok(tape.sum(l))
}

/// Contrastive loss between hypergraph embeddings `h` and fused embeddings
/// `ẽ` of the same rows:
/// `Σ_a −log[ e^{s(h_a, ẽ_a)} / Σ_{a'} (e^{s(h_{a'}, ẽ_a)} + e^{s(ẽ_{a'}, ẽ_a)}) ]`
/// with `s` the cosine similarity divided by `tau`. The anchor's own
/// terms stay in the denominator.
pub fn infonce_side_loss(tape: &mut Tape<'_>, h: Var, fused: Var, tau: f64) -> Result<Var> {
    let (rh, rf) = (tape.value(h).shape(), tape.value(fused).shape());
    if rh != rf {
        return Err(Error::DimensionMismatch {
            op: "infonce_side_loss",
            lhs: rh,
            rhs: rf,
        });
    }
    let hn = tape.row_normalize(h, NORM_EPS);
    let fz = tape.row_normalize(fused, NORM_EPS);
    let cross = tape.matmul_bt(fz, hn)?;
    let same = tape.matmul_bt(fz, fz)?;
    let logits = tape.concat_cols(cross, same)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let targets: Vec<usize> = (0..rh.0).collect();
    tape.softmax_cross_entropy(logits, &targets)
}

/// [`infonce_side_loss`] on plain matrices.
pub fn infonce_loss(h: &DenseMat, fused: &DenseMat, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant_ref(h);
    let fv = tape.constant_ref(fused);
    let l = infonce_side_loss(&mut tape, hv, fv, tau)?;
    Ok(tape.scalar(l))
}

/// Where each table lives in a [`ParamSet`]. `x_user` / `x_item` exist
/// only when the matching hypergraph branch is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingLayout {
    pub x_user: Option<ParamId>,
    pub x_item: Option<ParamId>,
    pub e_user: ParamId,
    pub e_item: ParamId,
    /// Diagonals of the per-layer transforms, `1×d`; present only with
    /// `trainable_transform` and the matching branch.
    pub w_user: Option<ParamId>,
    pub w_item: Option<ParamId>,
    /// Hypergraph convolution depth.
    pub layers: usize,
}

/// Trainable tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub params: ParamSet,
    pub layout: EmbeddingLayout,
}

/// Embeddings derived from an [`EmbeddingState`]; recomputed on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedEmbeddings {
    pub h_user: Option<DenseMat>,
    pub h_item: Option<DenseMat>,
    pub e_user: DenseMat,
    pub e_item: DenseMat,
    pub fused_user: DenseMat,
    pub fused_item: DenseMat,
}

impl EmbeddingState {
    /// Xavier-uniform initialization of every table.
    pub fn init<R: Rng + ?Sized>(
        users: usize,
        items: usize,
        config: &PretrainConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.dim;
        let mut params = ParamSet::new();
        let x_user = config
            .use_u2u
            .then(|| params.add("x_user", DenseMat::xavier_uniform(users, d, rng)));
        let x_item = config
            .use_i2i
            .then(|| params.add("x_item", DenseMat::xavier_uniform(items, d, rng)));
        let e_user = params.add("e_user", DenseMat::xavier_uniform(users, d, rng));
        let e_item = params.add("e_item", DenseMat::xavier_uniform(items, d, rng));
        let transform = |params: &mut ParamSet, on: bool, name: &str| {
            (on && config.trainable_transform).then(|| params.add(name, DenseMat::filled(1, d, 1.0)))
        };
        let w_user = transform(&mut params, config.use_u2u, "w_user");
        let w_item = transform(&mut params, config.use_i2i, "w_item");
        EmbeddingState {
            params,
            layout: EmbeddingLayout {
                x_user,
                x_item,
                e_user,
                e_item,
                w_user,
                w_item,
                layers: config.layers,
            },
        }
    }

    pub fn derive(&self, graphs: &PretrainGraphs) -> Result<DerivedEmbeddings> {
        let l = &self.layout;
        let conv = |id: Option<ParamId>, w: Option<ParamId>, op: &Option<HypergraphOperator>| -> Result<Option<DenseMat>> {
            let Some(id) = id else { return Ok(None) };
            let op = op.as_ref().ok_or_else(|| Error::invalid("hypergraph operator missing"))?;
            let Some(w) = w else {
                return encoders::hyperconv_forward(op, self.params.value(id), l.layers).map(Some);
            };
            let w = self.params.value(w).row(0);
            let mut x = self.params.value(id).clone();
            for _ in 0..l.layers {
                x = encoders::hyperconv_forward(op, &x, 1)?;
                x = DenseMat::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * w[c]);
            }
            Ok(Some(x))
        };
        let h_user = conv(l.x_user, l.w_user, &graphs.u2u)?;
        let h_item = conv(l.x_item, l.w_item, &graphs.i2i)?;
        let (e_user, e_item) = encoders::lightgcn_forward(
            &graphs.bipartite,
            self.params.value(l.e_user),
            self.params.value(l.e_item),
        )?;
        let fused_user = match &h_user {
            Some(h) => encoders::fuse(&e_user, h)?,
            None => e_user.clone(),
        };
        let fused_item = match &h_item {
            Some(h) => encoders::fuse(&e_item, h)?,
            None => e_item.clone(),
        };
        Ok(DerivedEmbeddings {
            h_user,
            h_item,
            e_user,
            e_item,
            fused_user,
            fused_item,
        })
    }
}

/// Tape nodes of the pretraining objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub bpr: Var,
    pub u2u: Option<Var>,
    pub i2i: Option<Var>,
    pub reg: Var,
    pub fused_user: Var,
    pub fused_item: Var,
}

fn batch_rows(triples: &[BprTriple], user_side: bool) -> Vec<usize> {
    let set: BTreeSet<usize> = if user_side {
        triples.iter().map(|t| t.user).collect()
    } else {
        triples.iter().flat_map(|t| [t.pos, t.neg]).collect()
    };
    set.into_iter().collect()
}

/// Records `L_BPR + α·L_U2U + β·L_I2I + λ·‖Θ‖²` on the tape.
pub fn pretrain_objective<'a>(
    tape: &mut Tape<'a>,
    p: &'a ParamSet,
    layout: &EmbeddingLayout,
    graphs: &'a PretrainGraphs,
    triples: &[BprTriple],
    config: &PretrainConfig,
) -> Result<ObjectiveVars> {
    let eu0 = tape.param(p, layout.e_user);
    let ei0 = tape.param(p, layout.e_item);
    let (eu, ei) = encoders::lightgcn_tape(tape, &graphs.bipartite, eu0, ei0)?;
    let mut reg = {
        let a = tape.sum_squares(eu0);
        let b = tape.sum_squares(ei0);
        tape.add(a, b)?
    };
    let mut side = |tape: &mut Tape<'a>,
                    id: Option<ParamId>,
                    w: Option<ParamId>,
                    op: &'a Option<HypergraphOperator>,
                    e: Var|
     -> Result<(Var, Option<Var>)> {
        let Some(id) = id else { return Ok((e, None)) };
        let op = op.as_ref().ok_or_else(|| Error::invalid("hypergraph operator missing"))?;
        let x0 = tape.param(p, id);
        let sq = tape.sum_squares(x0);
        reg = tape.add(reg, sq)?;
        let h = match w {
            None => encoders::hyperconv_tape(tape, op, x0, layout.layers)?,
            Some(w) => {
                let w = tape.param(p, w);
                let mut x = x0;
                for _ in 0..layout.layers {
                    x = tape.spmm(&op.matrix, x)?;
                    x = tape.mul_row(x, w)?;
                }
                x
            }
        };
        Ok((encoders::fuse_tape(tape, e, h)?, Some(h)))
    };
    let (fused_user, h_user) = side(tape, layout.x_user, layout.w_user, &graphs.u2u, eu)?;
    let (fused_item, h_item) = side(tape, layout.x_item, layout.w_item, &graphs.i2i, ei)?;

    let bpr = bpr_loss_tape(tape, fused_user, fused_item, triples)?;
    let contrast = |tape: &mut Tape<'a>, h: Option<Var>, f: Var, user_side: bool| -> Result<Option<Var>> {
        let Some(h) = h else { return Ok(None) };
        let (h, f) = match config.negatives {
            NegativeScope::Full => (h, f),
            NegativeScope::InBatch => {
                let rows = batch_rows(triples, user_side);
                (tape.gather_rows(h, &rows)?, tape.gather_rows(f, &rows)?)
            }
        };
        infonce_side_loss(tape, h, f, config.tau).map(Some)
    };
    let u2u = contrast(tape, h_user, fused_user, true)?;
    let i2i = contrast(tape, h_item, fused_item, false)?;

    let mut total = bpr;
    if let Some(l) = u2u {
        let w = tape.scale(l, config.alpha);
        total = tape.add(total, w)?;
    }
    if let Some(l) = i2i {
        let w = tape.scale(l, config.beta);
        total = tape.add(total, w)?;
    }
    let wreg = tape.scale(reg, config.lambda);
    total = tape.add(total, wreg)?;
    Ok(ObjectiveVars {
        total,
        bpr,
        u2u,
        i2i,
        reg,
        fused_user,
        fused_item,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub bpr: f64,
    pub u2u: f64,
    pub i2i: f64,
    pub reg: f64,
}

/// Evaluates the objective without updating anything.
pub fn pretrain_loss(
    state: &EmbeddingState,
    graphs: &PretrainGraphs,
    triples: &[BprTriple],
    config: &PretrainConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let v = pretrain_objective(&mut tape, &state.params, &state.layout, graphs, triples, config)?;
    Ok(breakdown(&tape, &v))
}

fn breakdown(tape: &Tape<'_>, v: &ObjectiveVars) -> LossBreakdown {
    LossBreakdown {
        total: tape.scalar(v.total),
        bpr: tape.scalar(v.bpr),
        u2u: v.u2u.map_or(0.0, |x| tape.scalar(x)),
        i2i: v.i2i.map_or(0.0, |x| tape.scalar(x)),
        reg: tape.scalar(v.reg),
    }
}

/// One Adam update of every table on the given batch. A non-finite loss
/// aborts before any parameter changes.
pub fn pretrain_step(
    state: &mut EmbeddingState,
    adam: &mut Adam,
    graphs: &PretrainGraphs,
    triples: &[BprTriple],
    config: &PretrainConfig,
) -> Result<LossBreakdown> {
    let (losses, grads) = {
        let mut tape = Tape::new();
        let v = pretrain_objective(&mut tape, &state.params, &state.layout, graphs, triples, config)?;
        let losses = breakdown(&tape, &v);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                what: "pretraining loss",
                row: 0,
                col: 0,
            });
        }
        (losses, tape.backward(v.total, &state.params))
    };
    state.params.zero_grads();
    state.params.accumulate(&grads);
    adam.step(&mut state.params);
    Ok(losses)
}

/// Ranks every item for each user in `truths` with the fused embeddings,
/// excluding that user's training items.
pub fn evaluate_embeddings(
    derived: &DerivedEmbeddings,
    graphs: &PretrainGraphs,
    truths: &BTreeMap<usize, usize>,
    ks: &[usize],
) -> Result<RankMetrics> {
    let keep = ks.iter().copied().max().unwrap_or(0);
    let rankings: BTreeMap<usize, Vec<usize>> = truths
        .keys()
        .map(|&u| {
            let scores = encoders::score_user(&derived.fused_user, &derived.fused_item, u);
            (u, rank_items(&scores, graphs.train_items(u), keep))
        })
        .collect();
    rank_metrics(&rankings, truths, ks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_bpr: f64,
    pub loss_u2u: f64,
    pub loss_i2i: f64,
    pub val_r20: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// State with the best validation Recall@20.
    pub state: EmbeddingState,
    /// Optimizer state matching `state`.
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains until `max_epochs`, or until `patience` consecutive epochs pass
/// after the last validation Recall@20 improvement. An epoch is
/// `ceil(nnz(A) / batch_size)` sampled batches.
pub fn train_pretrain(
    graphs: &PretrainGraphs,
    valid: &BTreeMap<usize, usize>,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let problems = config.violations();
    if !problems.is_empty() {
        return Err(Error::invalid(problems.join("; ")));
    }
    if config.use_u2u && graphs.u2u.is_none() {
        return Err(Error::invalid("use_u2u is set but no user operator was built"));
    }
    if config.use_i2i && graphs.i2i.is_none() {
        return Err(Error::invalid("use_i2i is set but no item operator was built"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = EmbeddingState::init(graphs.users(), graphs.items(), config, &mut rng);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &state.params);
    let steps = graphs.interactions.matrix.nnz().div_ceil(config.batch_size).max(1);
    let mut best: Option<(f64, usize, EmbeddingState, Adam)> = None;
    let mut since_best = 0usize;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut sum = LossBreakdown::default();
        for _ in 0..steps {
            let batch = sample_bpr_triples(&graphs.interactions.matrix, config.batch_size, &mut rng)?;
            let l = pretrain_step(&mut state, &mut adam, graphs, &batch, config)?;
            sum.total += l.total;
            sum.bpr += l.bpr;
            sum.u2u += l.u2u;
            sum.i2i += l.i2i;
        }
        let n = steps as f64;
        let derived = state.derive(graphs)?;
        let val_r20 = evaluate_embeddings(&derived, graphs, valid, &[20])?.recall[0];
        history.push(EpochRecord {
            epoch,
            loss_total: sum.total / n,
            loss_bpr: sum.bpr / n,
            loss_u2u: sum.u2u / n,
            loss_i2i: sum.i2i / n,
            val_r20,
        });
        let improved = best.as_ref().is_none_or(|(b, ..)| val_r20 > *b);
        if improved {
            best = Some((val_r20, epoch, state.clone(), adam.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, state, adam) = match best {
        Some(b) => b,
        None => (0.0, 0, state, adam),
    };
    Ok(PretrainOutcome {
        state,
        adam,
        history,
        best_epoch,
    })
}
