//! Incidence matrices and normalized hypergraph propagation operators.
//!
//! The user side uses the interaction matrix `A` as incidence (users are
//! nodes, items are hyperedges). The item side builds one KNN graph per
//! modality from cosine similarity and concatenates them so that every
//! `(modality, item)` neighbourhood becomes a hyperedge.
//!
//! Both sides are turned into `D^{-1/2} (H W Hᵀ) D^{-1/2}` with `W` the
//! identity unless explicit hyperedge weights are given.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ingest::{InteractionLog, ModalFeatureSet};
use crate::math;
use crate::numerics::{row_l2_normalize, DenseMat, SparseCsr, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::User => "u2u",
            Side::Item => "i2i",
        }
    }
}

/// Binary nodes × hyperedges membership matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Incidence {
    pub matrix: SparseCsr,
    pub side: Side,
}

/// Symmetric normalized nodes × nodes propagation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergraphOperator {
    pub matrix: SparseCsr,
    pub side: Side,
}

impl HypergraphOperator {
    pub fn nodes(&self) -> usize {
        self.matrix.rows()
    }
}

/// Binary `users × items` matrix of the given (training) log.
pub fn build_interaction_matrix(log: &InteractionLog) -> Incidence {
    let t = log.records().iter().map(|r| (r.user, r.item, 1.0));
    let mut m = SparseCsr::from_triplets(log.n_users(), log.n_items(), t)
        .expect("log ids are validated against its dimensions");
    // Repeated interactions with the same item must stay binary.
    let ones = vec![1.0; m.nnz()];
    m = SparseCsr::new(m.rows(), m.cols(), m.row_ptr().to_vec(), m.col_idx().to_vec(), ones)
        .expect("structure unchanged");
    Incidence {
        matrix: m,
        side: Side::User,
    }
}

/// KNN graph of one modality plus the rows whose feature vector had zero
/// norm (those rows see cosine 0 to every candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub matrix: SparseCsr,
    pub zero_norm_rows: Vec<usize>,
}

/// Row `i` gets ones at its `k` most cosine-similar other items and at
/// `(i, i)`. Ties go to the lower index.
pub fn knn_modal_graph(features: &ModalFeatureSet, k: usize) -> Result<KnnGraph> {
    knn_graph(features.features(), k)
}

pub fn knn_graph(features: &DenseMat, k: usize) -> Result<KnnGraph> {
    let n = features.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("knn needs 1 <= K < N, got K={k}, N={n}")));
    }
    let zero_norm_rows: Vec<usize> = (0..n).filter(|&i| features.row_norm(i) == 0.0).collect();
    if !zero_norm_rows.is_empty() {
        log::warn!(
            "{} item feature rows have zero norm; cosine treated as 0",
            zero_norm_rows.len()
        );
    }
    let unit = row_l2_normalize(features, NORM_EPS);
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
    };
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::with_capacity(n * (k + 1));
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let ui = unit.row(i);
        cand.clear();
        for j in (0..n).filter(|&j| j != i) {
            let s: f64 = ui.iter().zip(unit.row(j)).map(|(a, b)| a * b).sum();
            cand.push((s, j));
        }
        cand.select_nth_unstable_by(k - 1, by_rank);
        let mut cols: Vec<usize> = cand[..k].iter().map(|&(_, j)| j).collect();
        cols.push(i);
        cols.sort_unstable();
        col_idx.extend_from_slice(&cols);
        row_ptr.push(col_idx.len());
    }
    let vals = vec![1.0; col_idx.len()];
    Ok(KnnGraph {
        matrix: SparseCsr::new(n, n, row_ptr, col_idx, vals)?,
        zero_norm_rows,
    })
}

/// Item-side incidence `[Î¹ᵀ | Î²ᵀ | …]`: column `m·N + j` holds item
/// `j`'s neighbourhood in modality `m`.
pub fn concat_modalities(graphs: &[SparseCsr]) -> Result<Incidence> {
    let Some(first) = graphs.first() else {
        return Err(Error::invalid("no modality graphs given"));
    };
    let n = first.rows();
    if let Some(g) = graphs.iter().find(|g| g.rows() != n || g.cols() != n) {
        return Err(Error::DimensionMismatch {
            op: "concat_modalities",
            lhs: (n, n),
            rhs: g.shape(),
        });
    }
    let mut triplets = Vec::with_capacity(graphs.iter().map(|g| g.nnz()).sum());
    for (m, g) in graphs.iter().enumerate() {
        for j in 0..n {
            let (cs, vs) = g.row(j);
            for (&i, &v) in cs.iter().zip(vs) {
                triplets.push((i, m * n + j, v));
            }
        }
    }
    Ok(Incidence {
        matrix: SparseCsr::from_triplets(n, n * graphs.len(), triplets)?,
        side: Side::Item,
    })
}

/// `D^{-1/2} H Hᵀ D^{-1/2}` with `D` the row sums of `H Hᵀ`.
pub fn build_hypergraph_operator(h: &Incidence) -> Result<HypergraphOperator> {
    let w = vec![1.0; h.matrix.cols()];
    build_hypergraph_operator_weighted(h, &w)
}

/// Same as [`build_hypergraph_operator`] with a fixed diagonal hyperedge
/// weight matrix `W = diag(weights)`.
pub fn build_hypergraph_operator_weighted(h: &Incidence, weights: &[f64]) -> Result<HypergraphOperator> {
    let m = &h.matrix;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::invalid("hypergraph incidence is empty"));
    }
    if weights.len() != m.cols() {
        return Err(Error::DimensionMismatch {
            op: "hyperedge weights",
            lhs: m.shape(),
            rhs: (weights.len(), 1),
        });
    }
    let ht = m.transpose();
    let n = m.rows();
    // Gustavson row-by-row product with a dense accumulator.
    let mut acc = vec![0.0f64; n];
    let mut seen = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut vals = Vec::new();
    for u in 0..n {
        let (edges, hv) = m.row(u);
        for (&e, &a) in edges.iter().zip(hv) {
            let (nodes, tv) = ht.row(e);
            for (&v, &b) in nodes.iter().zip(tv) {
                if !seen[v] {
                    seen[v] = true;
                    touched.push(v);
                }
                acc[v] += a * weights[e] * b;
            }
        }
        touched.sort_unstable();
        for &v in &touched {
            col_idx.push(v);
            vals.push(acc[v]);
            acc[v] = 0.0;
            seen[v] = false;
        }
        touched.clear();
        row_ptr.push(col_idx.len());
    }
    let b = SparseCsr::new(n, n, row_ptr, col_idx, vals)?;
    let inv_sqrt: Vec<f64> = b
        .row_sums()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / math::sqrt(d) } else { 0.0 })
        .collect();
    Ok(HypergraphOperator {
        matrix: b.scale_rows_cols(&inv_sqrt, &inv_sqrt),
        side: h.side,
    })
}

/// Largest absolute eigenvalue estimate of a symmetric operator by power
/// iteration from a fixed positive start vector.
pub fn spectral_radius(op: &SparseCsr, iters: usize) -> f64 {
    let n = op.rows();
    if n == 0 {
        return 0.0;
    }
    let mut x = DenseMat::from_fn(n, 1, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = op.spmm_unchecked(&x);
        let norm = math::sqrt(y.sum_squares());
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / math::sqrt(x.sum_squares());
        x = y.scale(1.0 / norm);
    }
    lambda
}
