//! Frozen causal decoder with per-layer prefix key/value injection.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{AttnMask, DenseMat, Tape, Var};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Rows of the token table.
    pub vocab: usize,
    /// Rows of the absolute position table.
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn: 256,
            vocab: 32_000,
            max_positions: 64,
            seed: 0x5eed,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(alloc::format!(
                "d_model {} is not divisible into {} heads",
                self.d_model,
                self.heads
            )));
        }
        if self.layers == 0 || self.ffn == 0 || self.vocab == 0 || self.max_positions == 0 {
            return Err(Error::invalid("decoder sizes must all be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: DenseMat,
    wk: DenseMat,
    wv: DenseMat,
    wo: DenseMat,
    w_up: DenseMat,
    w_down: DenseMat,
}

/// Seeded random weights standing in for a pretrained model. Nothing here
/// is ever exposed mutably.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    config: DecoderConfig,
    tokens: DenseMat,
    positions: DenseMat,
    layers: Vec<Layer>,
}

fn normal(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DenseMat {
    DenseMat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

impl ToyDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let tokens = normal(config.vocab, d, 1.0, &mut rng);
        let positions = normal(config.max_positions, d, 0.1, &mut rng);
        let layers = (0..config.layers)
            .map(|_| Layer {
                wq: DenseMat::xavier_uniform(d, d, &mut rng),
                wk: DenseMat::xavier_uniform(d, d, &mut rng),
                wv: DenseMat::xavier_uniform(d, d, &mut rng),
                wo: DenseMat::xavier_uniform(d, d, &mut rng),
                w_up: DenseMat::xavier_uniform(d, config.ffn, &mut rng),
                w_down: DenseMat::xavier_uniform(config.ffn, d, &mut rng),
            })
            .collect();
        Ok(ToyDecoder {
            config,
            tokens,
            positions,
            layers,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn tokens(&self) -> &DenseMat {
        &self.tokens
    }

    pub fn positions(&self) -> &DenseMat {
        &self.positions
    }

    fn tensors(&self) -> impl Iterator<Item = &DenseMat> {
        [&self.tokens, &self.positions].into_iter().chain(
            self.layers
                .iter()
                .flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down]),
        )
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(DenseMat::len).sum()
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in self.tensors() {
            for v in m.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Hidden state of the last position after all layers and the final
    /// norm, as a `1×d̂` row. `prefix_keys` / `prefix_values` hold one
    /// `k×d̂` node per layer, or are empty for no injection.
    pub fn forward_last<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        prefix_keys: &[Var],
        prefix_values: &[Var],
    ) -> Result<Var> {
        let (n, d) = tape.value(x).shape();
        if d != self.config.d_model || n == 0 {
            return Err(Error::DimensionMismatch {
                op: "decoder_forward",
                lhs: (n, d),
                rhs: (1, self.config.d_model),
            });
        }
        let with_prefix = !prefix_keys.is_empty();
        if with_prefix && (prefix_keys.len() != self.layers.len() || prefix_values.len() != self.layers.len()) {
            return Err(Error::invalid("prefix bundle does not cover every decoder layer"));
        }
        let dh = self.config.head_dim();
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let xn = tape.rms_norm(h, NORM_EPS);
            let wq = tape.constant_ref(&layer.wq);
            let wk = tape.constant_ref(&layer.wk);
            let wv = tape.constant_ref(&layer.wv);
            let q = tape.matmul(xn, wq)?;
            let k = tape.matmul(xn, wk)?;
            let v = tape.matmul(xn, wv)?;
            let mut heads: Option<Var> = None;
            for hd in 0..self.config.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let (pk, pv) = if with_prefix {
                    (
                        Some(tape.slice_cols(prefix_keys[l], hd * dh, dh)?),
                        Some(tape.slice_cols(prefix_values[l], hd * dh, dh)?),
                    )
                } else {
                    (None, None)
                };
                let o = prefix_attention_tape(tape, qh, kh, vh, pk, pv, true)?;
                heads = Some(match heads {
                    None => o,
                    Some(acc) => tape.concat_cols(acc, o)?,
                });
            }
            let wo = tape.constant_ref(&layer.wo);
            let attn = tape.matmul(heads.expect("heads >= 1"), wo)?;
            h = tape.add(h, attn)?;
            let xn = tape.rms_norm(h, NORM_EPS);
            let up = tape.constant_ref(&layer.w_up);
            let down = tape.constant_ref(&layer.w_down);
            let f = tape.matmul(xn, up)?;
            let f = tape.silu(f);
            let f = tape.matmul(f, down)?;
            h = tape.add(h, f)?;
        }
        let last = tape.gather_rows(h, &[n - 1])?;
        Ok(tape.rms_norm(last, NORM_EPS))
    }
}

/// `softmax(Q K′ᵀ / √d_head + mask) V′` with `K′ = [P_K; K]`, `V′ = [P_V; V]`.
/// Prefix columns are visible to every query; with `causal`, query `r`
/// sees sequence keys `0..=r`.
pub fn prefix_attention_tape(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    p_k: Option<Var>,
    p_v: Option<Var>,
    causal: bool,
) -> Result<Var> {
    let (qs, ks, vs) = (tape.value(q).shape(), tape.value(k).shape(), tape.value(v).shape());
    if qs.1 != ks.1 || ks.0 != vs.0 || (causal && qs.0 > ks.0) {
        return Err(Error::DimensionMismatch {
            op: "prefix_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (k_all, v_all, prefix) = match (p_k, p_v) {
        (None, None) => (k, v, 0),
        (Some(pk), Some(pv)) => {
            let (pks, pvs) = (tape.value(pk).shape(), tape.value(pv).shape());
            if pks.0 != pvs.0 || pks.1 != ks.1 || pvs.1 != vs.1 {
                return Err(Error::DimensionMismatch {
                    op: "prefix_attention",
                    lhs: pks,
                    rhs: pvs,
                });
            }
            if pks.0 == 0 {
                (k, v, 0)
            } else {
                (tape.concat_rows(pk, k)?, tape.concat_rows(pv, v)?, pks.0)
            }
        }
        _ => return Err(Error::invalid("prefix keys and values must be given together")),
    };
    let scores = tape.matmul_bt(q, k_all)?;
    let scores = tape.scale(scores, 1.0 / math::sqrt(qs.1 as f64));
    let mask = if causal { AttnMask::causal(prefix) } else { AttnMask::NONE };
    let attn = tape.softmax_rows(scores, mask);
    tape.matmul(attn, v_all)
}

/// Plain evaluation of [`prefix_attention_tape`] for one head.
pub fn prefix_attention(
    q: &DenseMat,
    k: &DenseMat,
    v: &DenseMat,
    p_k: &DenseMat,
    p_v: &DenseMat,
    causal: bool,
) -> Result<DenseMat> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant_ref(q), tape.constant_ref(k), tape.constant_ref(v));
    let (pk, pv) = (tape.constant_ref(p_k), tape.constant_ref(p_v));
    let out = prefix_attention_tape(&mut tape, qv, kv, vv, Some(pk), Some(pv), causal)?;
    Ok(tape.value(out).clone())
}
