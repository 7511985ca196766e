//! Brute-force reference implementations shared by the integration suites.
//! Every function here works on plain nested loops over `DenseMat` and
//! never calls the routine it checks.
#![allow(dead_code)]

use hyperrec_core::numerics::DenseMat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMat {
    DenseMat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Binary matrix with entries set independently with probability `p`.
pub fn random_binary(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> DenseMat {
    DenseMat::from_fn(rows, cols, |_, _| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
}

pub fn matmul(a: &DenseMat, b: &DenseMat) -> DenseMat {
    assert_eq!(a.cols(), b.rows());
    DenseMat::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

pub fn transpose(a: &DenseMat) -> DenseMat {
    DenseMat::from_fn(a.cols(), a.rows(), |i, j| a.get(j, i))
}

pub fn max_abs_diff(a: &DenseMat, b: &DenseMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `D^{-1/2} H Hᵀ D^{-1/2}` with `D` the row sums of `H Hᵀ`.
pub fn hypergraph_operator(h: &DenseMat) -> DenseMat {
    let b = matmul(h, &transpose(h));
    let deg: Vec<f64> = (0..b.rows()).map(|i| (0..b.cols()).map(|j| b.get(i, j)).sum()).collect();
    DenseMat::from_fn(b.rows(), b.cols(), |i, j| {
        if deg[i] == 0.0 || deg[j] == 0.0 {
            0.0
        } else {
            b.get(i, j) / (deg[i].sqrt() * deg[j].sqrt())
        }
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Dense `N×N` KNN pattern by fully sorting every row's candidates.
pub fn knn_pattern(f: &DenseMat, k: usize) -> DenseMat {
    let n = f.rows();
    let mut out = DenseMat::zeros(n, n);
    for i in 0..n {
        let mut cands: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (cosine(f.row(i), f.row(j)), j)).collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        out.set(i, i, 1.0);
        for &(_, j) in cands.iter().take(k) {
            out.set(i, j, 1.0);
        }
    }
    out
}

/// LightGCN with mean layer combination; isolated nodes keep `e0`.
pub fn lightgcn(a: &DenseMat, eu: &DenseMat, ei: &DenseMat, layers: usize) -> (DenseMat, DenseMat) {
    let (m, n) = a.shape();
    let du: Vec<f64> = (0..m).map(|u| (0..n).map(|i| a.get(u, i)).sum()).collect();
    let di: Vec<f64> = (0..n).map(|i| (0..m).map(|u| a.get(u, i)).sum()).collect();
    let norm = DenseMat::from_fn(m, n, |u, i| {
        if a.get(u, i) == 0.0 {
            0.0
        } else {
            a.get(u, i) / (du[u].sqrt() * di[i].sqrt())
        }
    });
    let norm_t = transpose(&norm);
    let (mut u, mut i) = (eu.clone(), ei.clone());
    let (mut su, mut si) = (eu.clone(), ei.clone());
    for _ in 0..layers {
        let nu = matmul(&norm, &i);
        let ni = matmul(&norm_t, &u);
        su = DenseMat::from_fn(m, eu.cols(), |r, c| su.get(r, c) + nu.get(r, c));
        si = DenseMat::from_fn(n, ei.cols(), |r, c| si.get(r, c) + ni.get(r, c));
        u = nu;
        i = ni;
    }
    let l1 = (layers + 1) as f64;
    let ou = DenseMat::from_fn(m, eu.cols(), |r, c| if du[r] == 0.0 { eu.get(r, c) } else { su.get(r, c) / l1 });
    let oi = DenseMat::from_fn(n, ei.cols(), |r, c| if di[r] == 0.0 { ei.get(r, c) } else { si.get(r, c) / l1 });
    (ou, oi)
}

/// `Wᵀ Gᵀ G W` by explicit triple sums, row-major flattened.
pub fn second_order_pool(items: &[usize], graph: &DenseMat, w: &DenseMat) -> Vec<f64> {
    let dp = w.cols();
    let d = w.rows();
    let z: Vec<Vec<f64>> = items
        .iter()
        .map(|&it| (0..dp).map(|c| (0..d).map(|k| graph.get(it, k) * w.get(k, c)).sum()).collect())
        .collect();
    let mut out = vec![0.0; dp * dp];
    for a in 0..dp {
        for b in 0..dp {
            out[a * dp + b] = z.iter().map(|row| row[a] * row[b]).sum();
        }
    }
    out
}

/// Single-head attention over `[P_K; K]`, computed per query with explicit
/// exponent sums.
pub fn prefix_attention(q: &DenseMat, k: &DenseMat, v: &DenseMat, pk: &DenseMat, pv: &DenseMat, causal: bool) -> DenseMat {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let p = pk.rows();
    let mut out = DenseMat::zeros(q.rows(), v.cols());
    for r in 0..q.rows() {
        let mut keys: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for j in 0..p {
            keys.push((pk.row(j).to_vec(), pv.row(j).to_vec()));
        }
        for j in 0..k.rows() {
            if !causal || j <= r {
                keys.push((k.row(j).to_vec(), v.row(j).to_vec()));
            }
        }
        let logits: Vec<f64> = keys
            .iter()
            .map(|(kk, _)| kk.iter().zip(q.row(r)).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (l, (_, vv)) in logits.iter().zip(&keys) {
            let w = (l - mx).exp() / z;
            for c in 0..v.cols() {
                out.set(r, c, out.get(r, c) + w * vv[c]);
            }
        }
    }
    out
}

/// Contrastive loss by a double loop over anchors and candidates.
pub fn infonce(h: &DenseMat, f: &DenseMat, tau: f64) -> f64 {
    let m = h.rows();
    let mut total = 0.0;
    for a in 0..m {
        let pos = (cosine(h.row(a), f.row(a)) / tau).exp();
        let mut denom = 0.0;
        for b in 0..m {
            denom += (cosine(h.row(b), f.row(a)) / tau).exp();
            denom += (cosine(f.row(b), f.row(a)) / tau).exp();
        }
        total += -(pos / denom).ln();
    }
    total
}

/// `−Σ ln σ(s_ui − s_uj)` written exactly as the formula reads.
pub fn bpr(scores: &DenseMat, triples: &[(usize, usize, usize)]) -> f64 {
    triples
        .iter()
        .map(|&(u, i, j)| {
            let x = scores.get(u, i) - scores.get(u, j);
            -(1.0 / (1.0 + (-x).exp())).ln()
        })
        .sum()
}

/// `(R@K, N@K)` by scanning each ranking to its truth.
pub fn recall_ndcg(rankings: &[(Vec<usize>, usize)], k: usize) -> (f64, f64) {
    let mut r = 0.0;
    let mut n = 0.0;
    for (ranking, truth) in rankings {
        for (pos, &item) in ranking.iter().enumerate().take(k) {
            if item == *truth {
                r += 1.0;
                n += 1.0 / ((pos + 2) as f64).log2();
            }
        }
    }
    let users = rankings.len() as f64;
    (r / users, n / users)
}

/// Random orthogonal `d×d` matrix by Gram–Schmidt on random columns.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DenseMat {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    DenseMat::from_fn(d, d, |i, j| cols[j][i])
}
