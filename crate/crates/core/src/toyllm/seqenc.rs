//! Minimal self-attentive sequence encoder over item histories.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{AttnMask, DenseMat, ParamId, ParamSet, Tape, Var};

pub const DEFAULT_MAX_LEN: usize = 20;

/// Item table source. A frozen table is a constant, never a parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum SeqItems {
    Trainable(ParamId),
    Frozen(DenseMat),
}

/// One causal single-head attention layer over item plus position
/// embeddings. The output is `x_last + attn_last`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqEncoder {
    pub items: SeqItems,
    pub positions: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub max_len: usize,
    pub dim: usize,
    pub n_items: usize,
}

impl SeqEncoder {
    /// `frozen_items` replaces the trainable item table.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        n_items: usize,
        dim: usize,
        max_len: usize,
        frozen_items: Option<DenseMat>,
        rng: &mut R,
    ) -> Result<Self> {
        if max_len == 0 || dim == 0 {
            return Err(Error::invalid("sequence encoder needs max_len >= 1 and dim >= 1"));
        }
        let items = match frozen_items {
            Some(t) => {
                if t.shape() != (n_items, dim) {
                    return Err(Error::DimensionMismatch {
                        op: "seq_encoder_items",
                        lhs: t.shape(),
                        rhs: (n_items, dim),
                    });
                }
                SeqItems::Frozen(t)
            }
            None => SeqItems::Trainable(params.add("seq.items", DenseMat::xavier_uniform(n_items, dim, rng))),
        };
        Ok(SeqEncoder {
            items,
            positions: params.add("seq.positions", DenseMat::xavier_uniform(max_len, dim, rng)),
            wq: params.add("seq.wq", DenseMat::xavier_uniform(dim, dim, rng)),
            wk: params.add("seq.wk", DenseMat::xavier_uniform(dim, dim, rng)),
            wv: params.add("seq.wv", DenseMat::xavier_uniform(dim, dim, rng)),
            max_len,
            dim,
            n_items,
        })
    }

    pub fn param_ids(&self) -> alloc::vec::Vec<ParamId> {
        let mut ids = alloc::vec![self.positions, self.wq, self.wk, self.wv];
        if let SeqItems::Trainable(id) = self.items {
            ids.insert(0, id);
        }
        ids
    }

    /// The most recent `max_len` entries of `history`.
    pub fn truncate<'h>(&self, history: &'h [usize]) -> &'h [usize] {
        &history[history.len().saturating_sub(self.max_len)..]
    }

    /// `1×d` encoding of a nonempty history.
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a>, params: &'a ParamSet, history: &[usize]) -> Result<Var> {
        let hist = self.truncate(history);
        if hist.is_empty() {
            return Err(Error::EmptyHistory(0));
        }
        if let Some(&item) = hist.iter().find(|&&i| i >= self.n_items) {
            return Err(Error::UnknownItem {
                item,
                n_items: self.n_items,
            });
        }
        let n = hist.len();
        let table = match &self.items {
            SeqItems::Trainable(id) => tape.param(params, *id),
            SeqItems::Frozen(m) => tape.constant_ref(m),
        };
        let e = tape.gather_rows(table, hist)?;
        let pos = tape.param(params, self.positions);
        let idx: alloc::vec::Vec<usize> = (0..n).collect();
        let p = tape.gather_rows(pos, &idx)?;
        let x = tape.add(e, p)?;
        let last = tape.gather_rows(x, &[n - 1])?;
        let wq = tape.param(params, self.wq);
        let wk = tape.param(params, self.wk);
        let wv = tape.param(params, self.wv);
        // The last query sees every key, so no mask is needed.
        let q = tape.matmul(last, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let s = tape.matmul_bt(q, k)?;
        let s = tape.scale(s, 1.0 / math::sqrt(self.dim as f64));
        let a = tape.softmax_rows(s, AttnMask::NONE);
        let o = tape.matmul(a, v)?;
        tape.add(last, o)
    }

    pub fn encode(&self, params: &ParamSet, history: &[usize]) -> Result<DenseMat> {
        let mut tape = Tape::new();
        let v = self.forward_tape(&mut tape, params, history)?;
        Ok(tape.value(v).clone())
    }
}
