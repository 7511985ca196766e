//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! A [`Tape`] records one forward pass. Leaves are either constants or
//! borrowed slots of a [`ParamSet`]; sparse operands are always constants.
//! [`Tape::backward`] returns [`Grads`] keyed by [`ParamId`], which the
//! caller folds into the parameter set before an optimizer step.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::dense::{dot, DenseMat};
use crate::numerics::sparse::SparseCsr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices with gradient accumulators of the same shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<DenseMat>,
    grads: Vec<DenseMat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: DenseMat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let (r, c) = value.shape();
        self.names.push(name);
        self.values.push(value);
        self.grads.push(DenseMat::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseMat {
        &mut self.values[id.0]
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: DenseMat) -> Result<()> {
        let old = self.values[id.0].shape();
        if old != value.shape() {
            return Err(Error::DimensionMismatch {
                op: "ParamSet::set_value",
                lhs: old,
                rhs: value.shape(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &DenseMat {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Grads) {
        for (acc, g) in self.grads.iter_mut().zip(&grads.per_param) {
            if let Some(g) = g {
                acc.add_assign(g);
            }
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub(crate) fn grads_and_values_mut(&mut self) -> impl Iterator<Item = (&DenseMat, &mut DenseMat)> {
        self.grads.iter().zip(self.values.iter_mut())
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Grads {
    per_param: Vec<Option<DenseMat>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&DenseMat> {
        self.per_param.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a> {
    Owned(DenseMat),
    Borrowed(&'a DenseMat),
}

impl Value<'_> {
    fn get(&self) -> &DenseMat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op<'a> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Spmm(&'a SparseCsr, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    SumSq(Var),
    RowNormalize(Var, f64),
    RmsNorm(Var, f64),
    RowDot(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    RepeatRows(Var),
    Reshape(Var),
    Softmax(Var, AttnMask),
    SoftmaxXent(Var, Vec<usize>),
}

/// Visibility pattern for a row-wise softmax over attention scores.
///
/// Columns `0..prefix` are visible to every row. With `causal`, column
/// `prefix + j` is visible to row `r` only when `j <= r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMask {
    pub prefix: usize,
    pub causal: bool,
}

impl AttnMask {
    pub const NONE: AttnMask = AttnMask {
        prefix: 0,
        causal: false,
    };

    pub fn causal(prefix: usize) -> Self {
        AttnMask {
            prefix,
            causal: true,
        }
    }

    #[inline]
    pub fn visible(&self, row: usize, col: usize) -> bool {
        !self.causal || col < self.prefix || col - self.prefix <= row
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op<'a>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &DenseMat, b: &DenseMat) -> Error {
    Error::DimensionMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMat, op: Op<'a>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &DenseMat {
        self.nodes[v.0].value.get()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn constant(&mut self, m: DenseMat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, m: &'a DenseMat) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, params: &'a ParamSet, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(params.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(mismatch("matmul", x, y));
        }
        let out = x.matmul_unchecked(y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(mismatch("matmul_bt", x, y));
        }
        let out = x.matmul_bt_unchecked(y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Sparse constant times a dense node.
    pub fn spmm(&mut self, s: &'a SparseCsr, a: Var) -> Result<Var> {
        let x = self.value(a);
        if s.cols() != x.rows() {
            return Err(Error::DimensionMismatch {
                op: "tape spmm",
                lhs: s.shape(),
                rhs: x.shape(),
            });
        }
        let out = s.spmm_unchecked(x);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Spmm(s, a), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op<'a>,
    ) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), name, f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    fn check_row(&self, name: &'static str, a: Var, row: Var) -> Result<()> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(mismatch(name, x, r));
        }
        Ok(())
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let (x, r) = (self.value(a), self.value(row));
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let (x, r) = (self.value(a), self.value(row));
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// `x · σ(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * math::sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// `ln(1 + eˣ)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(DenseMat::filled(1, 1, s), Op::Sum(a), ng)
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let ng = self.ng(a);
        self.push(DenseMat::filled(1, 1, s), Op::SumSq(a), ng)
    }

    /// Each row divided by `max(‖row‖₂, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let out = crate::numerics::dense::row_l2_normalize(self.value(a), eps);
        let ng = self.ng(a);
        self.push(out, Op::RowNormalize(a, eps), ng)
    }

    /// Each row divided by `sqrt(mean(row²) + eps)`, without gain.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let n = x.cols().max(1) as f64;
        for i in 0..x.rows() {
            let r = math::sqrt(x.row(i).iter().map(|v| v * v).sum::<f64>() / n + eps);
            for v in out.row_mut(i) {
                *v /= r;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RmsNorm(a, eps), ng)
    }

    /// Row-wise inner products as an `n×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("row_dot", x, y));
        }
        let data = (0..x.rows()).map(|i| dot(x.row(i), y.row(i))).collect();
        let out = DenseMat::from_raw(x.rows(), 1, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::RowDot(a, b), ng))
    }

    /// Rows of `a` at `idx`, in order; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::invalid(alloc::format!(
                "gather_rows index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let out = x.select_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Gather(a, idx.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() {
            return Err(mismatch("concat_rows", x, y));
        }
        let mut data = Vec::with_capacity(x.len() + y.len());
        data.extend_from_slice(x.data());
        data.extend_from_slice(y.data());
        let out = DenseMat::from_raw(x.rows() + y.rows(), x.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatRows(a, b), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(mismatch("concat_cols", x, y));
        }
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for i in 0..x.rows() {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        let out = DenseMat::from_raw(x.rows(), cols, data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::invalid(alloc::format!(
                "slice_cols {start}..{} out of range for {} columns",
                start + len,
                x.cols()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let out = DenseMat::from_raw(x.rows(), len, data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Stacks a `1×c` row `k` times.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::invalid("repeat_rows expects a single row"));
        }
        let mut data = Vec::with_capacity(k * x.cols());
        for _ in 0..k {
            data.extend_from_slice(x.data());
        }
        let out = DenseMat::from_raw(k, x.cols(), data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::RepeatRows(a), ng))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if x.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                lhs: x.shape(),
                rhs: (rows, cols),
            });
        }
        let out = DenseMat::from_raw(rows, cols, x.data().to_vec());
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Row-wise softmax over the visible entries; masked entries are 0.
    pub fn softmax_rows(&mut self, a: Var, mask: AttnMask) -> Var {
        let x = self.value(a);
        let mut out = DenseMat::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = x.row(i);
            let max = (0..x.cols())
                .filter(|&c| mask.visible(i, c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                continue;
            }
            let orow = out.row_mut(i);
            let mut z = 0.0;
            for c in 0..row.len() {
                if mask.visible(i, c) {
                    orow[c] = math::exp(row[c] - max);
                    z += orow[c];
                }
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a, mask), ng)
    }

    /// `Σ_r [logsumexp(logits_r) − logits_r[target_r]]` as a `1×1` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                op: "softmax_cross_entropy",
                lhs: x.shape(),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= x.cols()) {
            return Err(Error::invalid(alloc::format!(
                "target {t} out of range for {} classes",
                x.cols()
            )));
        }
        let loss: f64 = (0..x.rows())
            .map(|i| math::log_sum_exp(x.row(i)) - x.get(i, targets[i]))
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            DenseMat::filled(1, 1, loss),
            Op::SoftmaxXent(logits, targets.to_vec()),
            ng,
        ))
    }

    /// Gradients of the `1×1` node `loss` with respect to every parameter
    /// leaf recorded on this tape.
    pub fn backward(self, loss: Var, params: &ParamSet) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<DenseMat>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar loss");
        grads[loss.0] = Some(DenseMat::filled(1, 1, 1.0));
        let mut out: Vec<Option<DenseMat>> = vec![None; params.len()];

        fn acc(grads: &mut [Option<DenseMat>], v: Var, g: DenseMat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let val = |v: Var| self.nodes[v.0].value.get();
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out[id.0] {
                    Some(e) => e.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                &Op::MatMul(a, b) => {
                    if ng(a) {
                        acc(&mut grads, a, g.matmul_bt_unchecked(val(b)));
                    }
                    if ng(b) {
                        acc(&mut grads, b, val(a).matmul_at_unchecked(&g));
                    }
                }
                &Op::MatMulBt(a, b) => {
                    if ng(a) {
                        acc(&mut grads, a, g.matmul_unchecked(val(b)));
                    }
                    if ng(b) {
                        acc(&mut grads, b, g.matmul_at_unchecked(val(a)));
                    }
                }
                &Op::Transpose(a) => acc(&mut grads, a, g.transpose()),
                &Op::Spmm(s, a) => acc(&mut grads, a, s.spmm_transposed_unchecked(&g)),
                &Op::Add(a, b) => {
                    if ng(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if ng(b) {
                        acc(&mut grads, b, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if ng(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if ng(b) {
                        acc(&mut grads, b, g.scale(-1.0));
                    }
                }
                &Op::Mul(a, b) => {
                    if ng(a) {
                        acc(&mut grads, a, hadamard(&g, val(b)));
                    }
                    if ng(b) {
                        acc(&mut grads, b, hadamard(&g, val(a)));
                    }
                }
                &Op::Scale(a, s) => acc(&mut grads, a, g.scale(s)),
                &Op::AddRow(a, r) => {
                    if ng(r) {
                        acc(&mut grads, r, col_sums(&g));
                    }
                    if ng(a) {
                        acc(&mut grads, a, g);
                    }
                }
                &Op::MulRow(a, r) => {
                    let (x, row) = (val(a), val(r));
                    if ng(r) {
                        acc(&mut grads, r, col_sums(&hadamard(&g, x)));
                    }
                    if ng(a) {
                        let mut ga = g;
                        for i in 0..ga.rows() {
                            for (o, &b) in ga.row_mut(i).iter_mut().zip(row.data()) {
                                *o *= b;
                            }
                        }
                        acc(&mut grads, a, ga);
                    }
                }
                &Op::Tanh(a) => {
                    let y = node.value.get();
                    let d = g.zip_with(y, "tanh'", |g, y| g * (1.0 - y * y)).expect("shape");
                    acc(&mut grads, a, d);
                }
                &Op::Silu(a) => {
                    let d = g
                        .zip_with(val(a), "silu'", |g, x| {
                            let s = math::sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .expect("shape");
                    acc(&mut grads, a, d);
                }
                &Op::Softplus(a) => {
                    let d = g
                        .zip_with(val(a), "softplus'", |g, x| g * math::sigmoid(x))
                        .expect("shape");
                    acc(&mut grads, a, d);
                }
                &Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut grads, a, DenseMat::filled(r, c, g.data()[0]));
                }
                &Op::SumSq(a) => acc(&mut grads, a, val(a).scale(2.0 * g.data()[0])),
                &Op::RowNormalize(a, eps) => {
                    let x = val(a);
                    let y = node.value.get();
                    let mut d = DenseMat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let norm = x.row_norm(i);
                        let gi = g.row(i);
                        let di = d.row_mut(i);
                        if norm > eps && norm > 0.0 {
                            let yg = dot(y.row(i), gi);
                            for ((o, &gv), &yv) in di.iter_mut().zip(gi).zip(y.row(i)) {
                                *o = (gv - yv * yg) / norm;
                            }
                        } else if eps > 0.0 {
                            for (o, &gv) in di.iter_mut().zip(gi) {
                                *o = gv / eps;
                            }
                        }
                    }
                    acc(&mut grads, a, d);
                }
                &Op::RmsNorm(a, eps) => {
                    let x = val(a);
                    let n = x.cols().max(1) as f64;
                    let mut d = DenseMat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let xi = x.row(i);
                        let gi = g.row(i);
                        let r = math::sqrt(xi.iter().map(|v| v * v).sum::<f64>() / n + eps);
                        let gx = dot(gi, xi);
                        for ((o, &gv), &xv) in d.row_mut(i).iter_mut().zip(gi).zip(xi) {
                            *o = gv / r - xv * gx / (n * r * r * r);
                        }
                    }
                    acc(&mut grads, a, d);
                }
                &Op::RowDot(a, b) => {
                    let (x, y) = (val(a), val(b));
                    if ng(a) {
                        let mut d = y.clone();
                        for i in 0..d.rows() {
                            let s = g.data()[i];
                            d.row_mut(i).iter_mut().for_each(|v| *v *= s);
                        }
                        acc(&mut grads, a, d);
                    }
                    if ng(b) {
                        let mut d = x.clone();
                        for i in 0..d.rows() {
                            let s = g.data()[i];
                            d.row_mut(i).iter_mut().for_each(|v| *v *= s);
                        }
                        acc(&mut grads, b, d);
                    }
                }
                Op::Gather(a, idx) => {
                    let x = val(*a);
                    let mut d = DenseMat::zeros(x.rows(), x.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                &Op::ConcatRows(a, b) => {
                    let split = val(a).len();
                    let (ra, ca) = val(a).shape();
                    if ng(a) {
                        acc(&mut grads, a, DenseMat::from_raw(ra, ca, g.data()[..split].to_vec()));
                    }
                    if ng(b) {
                        let (rb, cb) = val(b).shape();
                        acc(&mut grads, b, DenseMat::from_raw(rb, cb, g.data()[split..].to_vec()));
                    }
                }
                &Op::ConcatCols(a, b) => {
                    let ca = val(a).cols();
                    let cb = val(b).cols();
                    let rows = g.rows();
                    if ng(a) {
                        let d = DenseMat::from_fn(rows, ca, |i, j| g.get(i, j));
                        acc(&mut grads, a, d);
                    }
                    if ng(b) {
                        let d = DenseMat::from_fn(rows, cb, |i, j| g.get(i, ca + j));
                        acc(&mut grads, b, d);
                    }
                }
                &Op::SliceCols(a, start) => {
                    let x = val(a);
                    let mut d = DenseMat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        d.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, a, d);
                }
                &Op::RepeatRows(a) => acc(&mut grads, a, col_sums(&g)),
                &Op::Reshape(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut grads, a, DenseMat::from_raw(r, c, g.into_data()));
                }
                &Op::Softmax(a, mask) => {
                    let p = node.value.get();
                    let mut d = DenseMat::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let pg = dot(p.row(i), g.row(i));
                        for c in 0..p.cols() {
                            if mask.visible(i, c) {
                                d.set(i, c, p.get(i, c) * (g.get(i, c) - pg));
                            }
                        }
                    }
                    acc(&mut grads, a, d);
                }
                Op::SoftmaxXent(a, targets) => {
                    let x = val(*a);
                    let s = g.data()[0];
                    let mut d = DenseMat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let row = x.row(i);
                        let lse = math::log_sum_exp(row);
                        for (o, &v) in d.row_mut(i).iter_mut().zip(row) {
                            *o = s * math::exp(v - lse);
                        }
                        let t = targets[i];
                        d.set(i, t, d.get(i, t) - s);
                    }
                    acc(&mut grads, *a, d);
                }
            }
        }
        Grads { per_param: out }
    }
}

fn hadamard(a: &DenseMat, b: &DenseMat) -> DenseMat {
    a.zip_with(b, "hadamard", |x, y| x * y).expect("shapes checked at record time")
}

fn col_sums(g: &DenseMat) -> DenseMat {
    let mut out = DenseMat::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
