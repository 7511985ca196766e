use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::dense::DenseMat;

/// Compressed sparse row matrix of `f64`.
///
/// Column indices are strictly increasing within each row, so two matrices
/// with the same pattern and values compare equal regardless of how they
/// were assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCsr {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseCsr {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        vals: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1 {
            return Err(Error::InvalidCsr(format!(
                "row_ptr has length {}, expected {}",
                row_ptr.len(),
                rows + 1
            )));
        }
        if row_ptr[0] != 0 {
            return Err(Error::InvalidCsr(format!("row_ptr[0] = {}", row_ptr[0])));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidCsr("row_ptr is not nondecreasing".into()));
        }
        let nnz = row_ptr[rows];
        if col_idx.len() != nnz || vals.len() != nnz {
            return Err(Error::InvalidCsr(format!(
                "nnz = {nnz} but col_idx has {} and vals has {} entries",
                col_idx.len(),
                vals.len()
            )));
        }
        for r in 0..rows {
            let cs = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if cs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidCsr(format!(
                    "row {r}: column indices not strictly increasing"
                )));
            }
            if let Some(&c) = cs.last() {
                if c >= cols {
                    return Err(Error::InvalidCsr(format!("row {r}: column {c} >= {cols}")));
                }
            }
        }
        Ok(SparseCsr {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    /// Assembles a matrix from `(row, col, value)` triplets; duplicates are
    /// summed. Entries summing to exactly zero are kept.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut t: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        if let Some(&(r, c, _)) = t.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::InvalidCsr(format!(
                "triplet ({r}, {c}) outside {rows}x{cols}"
            )));
        }
        t.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx: Vec<usize> = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            vals.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseCsr {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseCsr {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn from_dense(d: &DenseMat) -> Self {
        let mut row_ptr = Vec::with_capacity(d.rows() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for r in 0..d.rows() {
            for (c, &v) in d.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseCsr {
            rows: d.rows(),
            cols: d.cols(),
            row_ptr,
            col_idx,
            vals,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.row_ptr[self.rows]
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn vals(&self) -> &[f64] {
        &self.vals
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[a..b], &self.vals[a..b])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cs, vs) = self.row(r);
        cs.binary_search(&c).map_or(0.0, |p| vs[p])
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).0.binary_search(&c).is_ok()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn col_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.cols];
        for &c in &self.col_idx {
            counts[c] += 1;
        }
        counts
    }

    pub fn transpose(&self) -> SparseCsr {
        let mut row_ptr = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            row_ptr[c + 1] += 1;
        }
        for c in 0..self.cols {
            row_ptr[c + 1] += row_ptr[c];
        }
        let mut next = row_ptr.clone();
        let mut col_idx = vec![0usize; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        // Rows are visited in increasing order, so each output row stays sorted.
        for r in 0..self.rows {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                let p = next[c];
                col_idx[p] = r;
                vals[p] = v;
                next[c] += 1;
            }
        }
        SparseCsr {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn to_dense(&self) -> DenseMat {
        let mut d = DenseMat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                d.set(r, c, v);
            }
        }
        d
    }

    /// Scales entry `(r, c)` by `left[r] * right[c]`.
    pub fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> SparseCsr {
        let mut out = self.clone();
        for r in 0..self.rows {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for p in a..b {
                out.vals[p] *= left[r] * right[self.col_idx[p]];
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let t = self.transpose();
        if t.row_ptr != self.row_ptr || t.col_idx != self.col_idx {
            return false;
        }
        self.vals.iter().zip(&t.vals).all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn spmm(&self, d: &DenseMat) -> Result<DenseMat> {
        if self.cols != d.rows() {
            return Err(Error::DimensionMismatch {
                op: "spmm",
                lhs: self.shape(),
                rhs: d.shape(),
            });
        }
        Ok(self.spmm_unchecked(d))
    }

    pub(crate) fn spmm_unchecked(&self, d: &DenseMat) -> DenseMat {
        let n = d.cols();
        let mut out = DenseMat::zeros(self.rows, n);
        for r in 0..self.rows {
            let (cs, vs) = self.row(r);
            let orow = out.row_mut(r);
            for (&c, &v) in cs.iter().zip(vs) {
                for (o, &x) in orow.iter_mut().zip(d.row(c)) {
                    *o += v * x;
                }
            }
        }
        out
    }

    /// `selfᵀ · d` without materializing the transpose.
    pub(crate) fn spmm_transposed_unchecked(&self, d: &DenseMat) -> DenseMat {
        let n = d.cols();
        let mut out = DenseMat::zeros(self.cols, n);
        for r in 0..self.rows {
            let (cs, vs) = self.row(r);
            let drow = d.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(drow) {
                    *o += v * x;
                }
            }
        }
        out
    }
}

/// Sparse-dense product `S · D`.
///
/// Work is one multiply-add per stored entry per output column, i.e.
/// `O(nnz · d)`; for at most `k` entries per row over `N` rows that is
/// `O(N · k · d)`.
pub fn spmm(s: &SparseCsr, d: &DenseMat) -> Result<DenseMat> {
    s.spmm(d)
}
