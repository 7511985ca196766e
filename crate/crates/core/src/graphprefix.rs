//! Per-user key/value prefixes from interacted-item graph embeddings.
//!
//! `H = flatten(Wᵀ Gᵀ G W)` over the user's item rows `G`, then
//! `P̂ = MLP(RMSNorm(H))` for keys and values separately, then `k` copies
//! of `P̂` plus a per-layer `k×d̂` bias.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{DenseMat, ParamId, ParamSet, Tape, Var};

pub const RMS_EPS: f64 = 1e-6;

/// Scale of the uniform init of prefix biases. Nonzero so the `k` prefix
/// rows can diverge under training.
const BIAS_INIT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    /// Graph embedding width `d`.
    pub d: usize,
    /// Pooled width `d′ < d`.
    pub d_pooled: usize,
    /// Decoder width `d̂`.
    pub d_model: usize,
    /// Prefix rows `k`; 0 disables injection.
    pub prefix_len: usize,
    /// Decoder layers served.
    pub layers: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            d: 64,
            d_pooled: 8,
            d_model: 64,
            prefix_len: 4,
            layers: 2,
        }
    }
}

impl PoolConfig {
    pub fn pooled_len(&self) -> usize {
        self.d_pooled * self.d_pooled
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_pooled == 0 || self.d_pooled >= self.d {
            return Err(Error::invalid(format!(
                "pooled dim must satisfy 0 < d' < d, got d'={} d={}",
                self.d_pooled, self.d
            )));
        }
        if self.d_model == 0 {
            return Err(Error::invalid("decoder dim must be >= 1"));
        }
        Ok(())
    }
}

fn check_items(user_items: &[usize], n_items: usize, user: usize) -> Result<()> {
    if user_items.is_empty() {
        return Err(Error::EmptyHistory(user));
    }
    if let Some(&item) = user_items.iter().find(|&&i| i >= n_items) {
        return Err(Error::UnknownItem { item, n_items });
    }
    Ok(())
}

/// Row-major `d′²` vector `flatten(Wᵀ Gᵀ G W)` where `G` stacks the rows
/// of `graph` at `user_items`.
pub fn second_order_pool(user_items: &[usize], graph: &DenseMat, w: &DenseMat) -> Result<Vec<f64>> {
    check_items(user_items, graph.rows(), 0)?;
    if w.rows() != graph.cols() {
        return Err(Error::DimensionMismatch {
            op: "second_order_pool",
            lhs: graph.shape(),
            rhs: w.shape(),
        });
    }
    let z = graph.select_rows(user_items).matmul_unchecked(w);
    Ok(z.matmul_at_unchecked(&z).into_data())
}

/// Tape form of [`second_order_pool`]; the result is a `1×d′²` row.
pub fn second_order_pool_tape(tape: &mut Tape<'_>, user_items: &[usize], graph: Var, w: Var) -> Result<Var> {
    check_items(user_items, tape.value(graph).rows(), 0)?;
    let g = tape.gather_rows(graph, user_items)?;
    let z = tape.matmul(g, w)?;
    let zt = tape.transpose(z);
    let gram = tape.matmul(zt, z)?;
    let dp = tape.value(w).cols();
    tape.reshape(gram, 1, dp * dp)
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let r = math::sqrt(ms + eps);
    x.iter().zip(gain).map(|(v, g)| g * v / r).collect()
}

/// `tanh(x W₁ + b₁) W₂ + b₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    /// Xavier-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            w1: params.add(format!("{name}.w1"), DenseMat::xavier_uniform(d_in, hidden, rng)),
            b1: params.add(format!("{name}.b1"), DenseMat::zeros(1, hidden)),
            w2: params.add(format!("{name}.w2"), DenseMat::xavier_uniform(hidden, d_out, rng)),
            b2: params.add(format!("{name}.b2"), DenseMat::zeros(1, d_out)),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, params: &ParamSet, x: &DenseMat) -> Result<DenseMat> {
        let mut tape = Tape::new();
        let xv = tape.constant_ref(x);
        let y = self.forward_tape(&mut tape, params, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward_tape<'a>(&self, tape: &mut Tape<'a>, params: &'a ParamSet, x: Var) -> Result<Var> {
        let w1 = tape.param(params, self.w1);
        let b1 = tape.param(params, self.b1);
        let w2 = tape.param(params, self.w2);
        let b2 = tape.param(params, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }
}

/// Per-layer prefix keys and values, each `k×d̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBundle {
    pub keys: Vec<DenseMat>,
    pub values: Vec<DenseMat>,
}

impl PrefixBundle {
    /// Bundle of `0×d_model` matrices, which disables injection.
    pub fn empty(layers: usize, d_model: usize) -> Self {
        PrefixBundle {
            keys: (0..layers).map(|_| DenseMat::zeros(0, d_model)).collect(),
            values: (0..layers).map(|_| DenseMat::zeros(0, d_model)).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn prefix_len(&self) -> usize {
        self.keys.first().map_or(0, DenseMat::rows)
    }
}

/// Row `r` of layer `l` is `p + bias[l].row(r)`, for keys and values.
pub fn expand_prefix(
    p_k: &[f64],
    p_v: &[f64],
    bias_k: &[DenseMat],
    bias_v: &[DenseMat],
) -> Result<PrefixBundle> {
    if bias_k.len() != bias_v.len() {
        return Err(Error::invalid("key and value biases cover different layer counts"));
    }
    let expand = |p: &[f64], b: &DenseMat| -> Result<DenseMat> {
        if b.cols() != p.len() {
            return Err(Error::DimensionMismatch {
                op: "expand_prefix",
                lhs: (1, p.len()),
                rhs: b.shape(),
            });
        }
        Ok(DenseMat::from_fn(b.rows(), b.cols(), |r, c| p[c] + b.get(r, c)))
    };
    let keys = bias_k.iter().map(|b| expand(p_k, b)).collect::<Result<Vec<_>>>()?;
    let values = bias_v.iter().map(|b| expand(p_v, b)).collect::<Result<Vec<_>>>()?;
    if keys.iter().chain(&values).any(|m| m.rows() != keys[0].rows()) {
        return Err(Error::invalid("prefix biases disagree on k"));
    }
    Ok(PrefixBundle { keys, values })
}

/// Tape prefixes; both lists are empty when `k = 0`.
#[derive(Debug, Clone, Default)]
pub struct TapePrefix {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Trainable pooling, projection and expansion parameters. The projection
/// MLPs are shared across decoder layers; biases are per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPrefix {
    pub config: PoolConfig,
    pub w: ParamId,
    pub gain: ParamId,
    pub mlp_k: Mlp,
    pub mlp_v: Mlp,
    pub bias_k: Vec<ParamId>,
    pub bias_v: Vec<ParamId>,
}

impl GraphPrefix {
    /// Registers every tensor in `params`. With `k = 0` no biases are created.
    pub fn init<R: Rng + ?Sized>(params: &mut ParamSet, config: PoolConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let p = config.pooled_len();
        let w = params.add("pool.w", DenseMat::xavier_uniform(config.d, config.d_pooled, rng));
        let gain = params.add("pool.gain", DenseMat::filled(1, p, 1.0));
        let mlp_k = Mlp::init(params, "mlp_k", p, config.d_model, config.d_model, rng);
        let mlp_v = Mlp::init(params, "mlp_v", p, config.d_model, config.d_model, rng);
        let (mut bias_k, mut bias_v) = (Vec::new(), Vec::new());
        if config.prefix_len > 0 {
            for l in 0..config.layers {
                let k = DenseMat::uniform(config.prefix_len, config.d_model, BIAS_INIT, rng);
                bias_k.push(params.add(format!("prefix.bias_k.{l}"), k));
                let v = DenseMat::uniform(config.prefix_len, config.d_model, BIAS_INIT, rng);
                bias_v.push(params.add(format!("prefix.bias_v.{l}"), v));
            }
        }
        Ok(GraphPrefix {
            config,
            w,
            gain,
            mlp_k,
            mlp_v,
            bias_k,
            bias_v,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.w, self.gain];
        ids.extend(self.mlp_k.ids());
        ids.extend(self.mlp_v.ids());
        ids.extend(&self.bias_k);
        ids.extend(&self.bias_v);
        ids
    }

    /// `(MLP_K(RMSNorm(h)), MLP_V(RMSNorm(h)))`.
    pub fn prefix_project(&self, params: &ParamSet, h_graph: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if h_graph.len() != self.config.pooled_len() {
            return Err(Error::DimensionMismatch {
                op: "prefix_project",
                lhs: (1, h_graph.len()),
                rhs: (1, self.config.pooled_len()),
            });
        }
        let x = rms_norm(h_graph, params.value(self.gain).data(), RMS_EPS);
        let x = DenseMat::from_raw(1, x.len(), x);
        let k = self.mlp_k.forward(params, &x)?.into_data();
        let v = self.mlp_v.forward(params, &x)?.into_data();
        Ok((k, v))
    }

    /// Plain evaluation of the full pipeline for one user.
    pub fn bundle(&self, params: &ParamSet, user_items: &[usize], graph: &DenseMat) -> Result<PrefixBundle> {
        if self.config.prefix_len == 0 {
            return Ok(PrefixBundle::empty(self.config.layers, self.config.d_model));
        }
        let h = second_order_pool(user_items, graph, params.value(self.w))?;
        let (pk, pv) = self.prefix_project(params, &h)?;
        let bk: Vec<DenseMat> = self.bias_k.iter().map(|&b| params.value(b).clone()).collect();
        let bv: Vec<DenseMat> = self.bias_v.iter().map(|&b| params.value(b).clone()).collect();
        expand_prefix(&pk, &pv, &bk, &bv)
    }

    /// Tape evaluation for one user with `graph` an `N×d` node.
    pub fn bundle_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        user_items: &[usize],
        graph: Var,
    ) -> Result<TapePrefix> {
        if self.config.prefix_len == 0 {
            return Ok(TapePrefix::default());
        }
        let w = tape.param(params, self.w);
        let h = second_order_pool_tape(tape, user_items, graph, w)?;
        let gain = tape.param(params, self.gain);
        let x = tape.rms_norm(h, RMS_EPS);
        let x = tape.mul_row(x, gain)?;
        let pk = self.mlp_k.forward_tape(tape, params, x)?;
        let pv = self.mlp_v.forward_tape(tape, params, x)?;
        let k = self.config.prefix_len;
        let rk = tape.repeat_rows(pk, k)?;
        let rv = tape.repeat_rows(pv, k)?;
        let mut out = TapePrefix::default();
        for (&bk, &bv) in self.bias_k.iter().zip(&self.bias_v) {
            let bk = tape.param(params, bk);
            let bv = tape.param(params, bv);
            out.keys.push(tape.add(rk, bk)?);
            out.values.push(tape.add(rv, bv)?);
        }
        Ok(out)
    }
}
