//! Forward passes of the pretraining encoders.
//!
//! Each encoder has a plain version over [`DenseMat`] and a tape version
//! used during training. The two share their sparse operands and must
//! agree to rounding.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hypergraph::{HypergraphOperator, Incidence};
use crate::math;
use crate::numerics::dense::dot;
use crate::numerics::{row_l2_normalize, DenseMat, SparseCsr, Tape, Var, NORM_EPS};

/// `X⁽ᴸ⁾` where `X⁽ˡ⁺¹⁾ = H̄ X⁽ˡ⁾`.
pub fn hyperconv_forward(op: &HypergraphOperator, x0: &DenseMat, layers: usize) -> Result<DenseMat> {
    let m = &op.matrix;
    if m.rows() != m.cols() || m.cols() != x0.rows() {
        return Err(Error::DimensionMismatch {
            op: "hyperconv_forward",
            lhs: m.shape(),
            rhs: x0.shape(),
        });
    }
    let mut x = x0.clone();
    for _ in 0..layers {
        x = m.spmm_unchecked(&x);
    }
    Ok(x)
}

pub fn hyperconv_tape<'a>(
    tape: &mut Tape<'a>,
    op: &'a HypergraphOperator,
    x0: Var,
    layers: usize,
) -> Result<Var> {
    let mut x = x0;
    for _ in 0..layers {
        x = tape.spmm(&op.matrix, x)?;
    }
    Ok(x)
}

/// Symmetrically normalized user–item graph `Â = D_u^{-1/2} A D_i^{-1/2}`
/// together with its transpose and the corrections that let isolated
/// nodes keep their layer-0 embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub norm: SparseCsr,
    pub norm_t: SparseCsr,
    isolated_users: SparseCsr,
    isolated_items: SparseCsr,
    layers: usize,
}

impl BipartiteGraph {
    pub fn new(a: &Incidence, layers: usize) -> Self {
        let m = &a.matrix;
        let du: Vec<f64> = m.row_sums();
        let mut di = alloc::vec![0.0; m.cols()];
        for (&c, &v) in m.col_idx().iter().zip(m.vals()) {
            di[c] += v;
        }
        let inv = |d: &f64| if *d > 0.0 { 1.0 / math::sqrt(*d) } else { 0.0 };
        let du_inv: Vec<f64> = du.iter().map(inv).collect();
        let di_inv: Vec<f64> = di.iter().map(inv).collect();
        let norm = m.scale_rows_cols(&du_inv, &di_inv);
        let norm_t = norm.transpose();
        // Mean combination leaves e⁰/(L+1) on isolated nodes; add back the rest.
        let fix = layers as f64 / (layers + 1) as f64;
        let diag = |deg: &[f64]| {
            let t = deg
                .iter()
                .enumerate()
                .filter(|(_, &d)| d == 0.0 && layers > 0)
                .map(|(i, _)| (i, i, fix));
            SparseCsr::from_triplets(deg.len(), deg.len(), t).expect("diagonal in range")
        };
        BipartiteGraph {
            isolated_users: diag(&du),
            isolated_items: diag(&di),
            norm,
            norm_t,
            layers,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn users(&self) -> usize {
        self.norm.rows()
    }

    pub fn items(&self) -> usize {
        self.norm.cols()
    }
}

/// LightGCN propagation with mean layer combination over layers `0..=L`.
pub fn lightgcn_forward(
    g: &BipartiteGraph,
    e_user: &DenseMat,
    e_item: &DenseMat,
) -> Result<(DenseMat, DenseMat)> {
    if e_user.rows() != g.users() || e_item.rows() != g.items() || e_user.cols() != e_item.cols() {
        return Err(Error::DimensionMismatch {
            op: "lightgcn_forward",
            lhs: e_user.shape(),
            rhs: e_item.shape(),
        });
    }
    let (mut u, mut i) = (e_user.clone(), e_item.clone());
    let (mut su, mut si) = (e_user.clone(), e_item.clone());
    for _ in 0..g.layers {
        let nu = g.norm.spmm_unchecked(&i);
        let ni = g.norm_t.spmm_unchecked(&u);
        su.add_assign(&nu);
        si.add_assign(&ni);
        u = nu;
        i = ni;
    }
    let inv = 1.0 / (g.layers + 1) as f64;
    let mut out_u = su.scale(inv);
    let mut out_i = si.scale(inv);
    out_u.add_assign(&g.isolated_users.spmm_unchecked(e_user));
    out_i.add_assign(&g.isolated_items.spmm_unchecked(e_item));
    Ok((out_u, out_i))
}

pub fn lightgcn_tape<'a>(
    tape: &mut Tape<'a>,
    g: &'a BipartiteGraph,
    e_user: Var,
    e_item: Var,
) -> Result<(Var, Var)> {
    let (mut u, mut i) = (e_user, e_item);
    let (mut su, mut si) = (e_user, e_item);
    for _ in 0..g.layers {
        let nu = tape.spmm(&g.norm, i)?;
        let ni = tape.spmm(&g.norm_t, u)?;
        su = tape.add(su, nu)?;
        si = tape.add(si, ni)?;
        u = nu;
        i = ni;
    }
    let inv = 1.0 / (g.layers + 1) as f64;
    let mu = tape.scale(su, inv);
    let mi = tape.scale(si, inv);
    let fu = tape.spmm(&g.isolated_users, e_user)?;
    let fi = tape.spmm(&g.isolated_items, e_item)?;
    Ok((tape.add(mu, fu)?, tape.add(mi, fi)?))
}

/// `e + h / max(‖h‖₂, eps)` row-wise.
pub fn fuse(e: &DenseMat, h: &DenseMat) -> Result<DenseMat> {
    e.add(&row_l2_normalize(h, NORM_EPS))
}

pub fn fuse_tape(tape: &mut Tape<'_>, e: Var, h: Var) -> Result<Var> {
    let hn = tape.row_normalize(h, NORM_EPS);
    tape.add(e, hn)
}

/// Inner-product scores `⟨ẽ_u, ẽ_i⟩` for the requested `(user, item)` pairs.
pub fn fuse_and_score(
    e_user: &DenseMat,
    h_user: &DenseMat,
    e_item: &DenseMat,
    h_item: &DenseMat,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let fu = fuse(e_user, h_user)?;
    let fi = fuse(e_item, h_item)?;
    if fu.cols() != fi.cols() {
        return Err(Error::DimensionMismatch {
            op: "fuse_and_score",
            lhs: fu.shape(),
            rhs: fi.shape(),
        });
    }
    pairs
        .iter()
        .map(|&(u, i)| {
            if u >= fu.rows() || i >= fi.rows() {
                return Err(Error::invalid(alloc::format!("pair ({u}, {i}) out of range")));
            }
            Ok(dot(fu.row(u), fi.row(i)))
        })
        .collect()
}

/// Full `users × items` score matrix `Ẽ_u Ẽ_iᵀ`.
pub fn score_matrix(fused_user: &DenseMat, fused_item: &DenseMat) -> DenseMat {
    fused_user.matmul_bt_unchecked(fused_item)
}

/// Scores of one user against every item.
pub fn score_user(fused_user: &DenseMat, fused_item: &DenseMat, user: usize) -> Vec<f64> {
    let u = fused_user.row(user);
    (0..fused_item.rows()).map(|i| dot(u, fused_item.row(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::Side;

    #[test]
    fn zero_layers_is_identity() {
        let op = HypergraphOperator {
            matrix: SparseCsr::from_triplets(2, 2, [(0, 1, 0.5), (1, 0, 0.5)]).unwrap(),
            side: Side::User,
        };
        let x = DenseMat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(hyperconv_forward(&op, &x, 0).unwrap(), x);
        let bad = DenseMat::zeros(3, 2);
        assert!(hyperconv_forward(&op, &bad, 1).is_err());
        assert!(hyperconv_forward(&op, &bad, 0).is_err());
    }

    #[test]
    fn single_edge_lightgcn_swaps_embeddings() {
        let a = Incidence {
            matrix: SparseCsr::identity(1),
            side: Side::User,
        };
        let g = BipartiteGraph::new(&a, 1);
        let eu = DenseMat::from_rows(&[&[1.0, 0.0]]).unwrap();
        let ei = DenseMat::from_rows(&[&[0.0, 3.0]]).unwrap();
        let (u, i) = lightgcn_forward(&g, &eu, &ei).unwrap();
        // mean of layer 0 and layer 1, layer-1 user = item embedding
        assert_eq!(u.row(0), &[0.5, 1.5]);
        assert_eq!(i.row(0), &[0.5, 1.5]);
    }

    #[test]
    fn isolated_nodes_keep_layer_zero() {
        let a = Incidence {
            matrix: SparseCsr::from_triplets(2, 2, [(0, 0, 1.0)]).unwrap(),
            side: Side::User,
        };
        let g = BipartiteGraph::new(&a, 2);
        let eu = DenseMat::from_rows(&[&[1.0], &[7.0]]).unwrap();
        let ei = DenseMat::from_rows(&[&[2.0], &[-5.0]]).unwrap();
        let (u, i) = lightgcn_forward(&g, &eu, &ei).unwrap();
        assert!((u.get(1, 0) - 7.0).abs() < 1e-15);
        assert!((i.get(1, 0) + 5.0).abs() < 1e-15);
    }

    #[test]
    fn fusion_edge_cases() {
        let e = DenseMat::zeros(1, 2);
        let h = DenseMat::from_rows(&[&[3.0, 4.0]]).unwrap();
        let f = fuse(&e, &h).unwrap();
        assert!((f.get(0, 0) - 0.6).abs() < 1e-15 && (f.get(0, 1) - 0.8).abs() < 1e-15);
        let e2 = DenseMat::from_rows(&[&[1.5, -2.0]]).unwrap();
        assert_eq!(fuse(&e2, &DenseMat::zeros(1, 2)).unwrap(), e2);
    }
}
