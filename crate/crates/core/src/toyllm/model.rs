//! Prompt assembly, item-restricted head and the fine-tuning loop.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::decoder::{DecoderConfig, ToyDecoder};
use super::seqenc::{SeqEncoder, SeqItems, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::eval::{rank_items, rank_metrics, RankMetrics, SplitSet};
use crate::graphprefix::{GraphPrefix, Mlp, PoolConfig};
use crate::math;
use crate::numerics::{Adam, AdamConfig, DenseMat, ParamId, ParamSet, Tape, Var};

/// Instruction token ids placed before and after the injected history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
}

impl Default for Template {
    fn default() -> Self {
        Template {
            head: (1..=8).collect(),
            tail: (9..=11).collect(),
        }
    }
}

impl Template {
    pub fn len(&self) -> usize {
        self.head.len() + self.tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder input rows: `head ‖ injected history ‖ tail`, positions added.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    pub embeddings: DenseMat,
    pub injected: Vec<bool>,
    pub positions: Vec<usize>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.injected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.injected.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub pool: PoolConfig,
    pub decoder: DecoderConfig,
    pub seq_max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            pool: PoolConfig::default(),
            decoder: DecoderConfig::default(),
            seq_max_len: DEFAULT_MAX_LEN,
            lr: 3e-4,
            batch_size: 7,
            epochs: 20,
            seed: 0,
        }
    }
}

/// One next-item training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub history: Vec<usize>,
    pub label: usize,
}

/// Ranked items with their softmax probabilities over all `N` items.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
    /// The history was empty and only the head bias was used.
    pub cold: bool,
}

/// Frozen decoder plus the trainable set. Trainable tensors live in a
/// separate [`ParamSet`] returned by [`FineTuneModel::new`].
#[derive(Debug, Clone)]
pub struct FineTuneModel {
    pub config: FineTuneConfig,
    pub template: Template,
    decoder: ToyDecoder,
    /// Pretrained item embeddings, read-only.
    graph: DenseMat,
    pub prefix: GraphPrefix,
    pub fusion: Mlp,
    pub seq: SeqEncoder,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl FineTuneModel {
    /// `graph` is the `N×d` item table; `frozen_seq_items` replaces the
    /// sequence encoder's trainable item table.
    pub fn new(
        config: FineTuneConfig,
        graph: DenseMat,
        template: Template,
        frozen_seq_items: Option<DenseMat>,
    ) -> Result<(Self, ParamSet)> {
        let decoder = ToyDecoder::new(config.decoder)?;
        let d = graph.cols();
        let n = graph.rows();
        if n == 0 {
            return Err(Error::invalid("graph embedding table has no items"));
        }
        if config.pool.d != d || config.pool.d_model != config.decoder.d_model || config.pool.layers != config.decoder.layers {
            return Err(Error::invalid(alloc::format!(
                "pool config (d={}, d_model={}, layers={}) does not match graph width {d} and decoder (d_model={}, layers={})",
                config.pool.d,
                config.pool.d_model,
                config.pool.layers,
                config.decoder.d_model,
                config.decoder.layers
            )));
        }
        if let Some(&t) = template.head.iter().chain(&template.tail).find(|&&t| t >= config.decoder.vocab) {
            return Err(Error::invalid(alloc::format!("template token {t} outside vocabulary")));
        }
        if template.len() + config.seq_max_len > config.decoder.max_positions {
            return Err(Error::invalid("template plus max history exceeds decoder positions"));
        }
        if config.batch_size == 0 || !(config.lr > 0.0) {
            return Err(Error::invalid("fine-tuning needs batch_size >= 1 and lr > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let dm = config.decoder.d_model;
        let prefix = GraphPrefix::init(&mut params, config.pool, &mut rng)?;
        let fusion = Mlp::init(&mut params, "fusion", 2 * d, dm, dm, &mut rng);
        let seq = SeqEncoder::init(&mut params, n, d, config.seq_max_len, frozen_seq_items, &mut rng)?;
        let head_w = params.add("head.w", DenseMat::xavier_uniform(dm, n, &mut rng));
        let head_b = params.add("head.b", DenseMat::zeros(1, n));
        Ok((
            FineTuneModel {
                config,
                template,
                decoder,
                graph,
                prefix,
                fusion,
                seq,
                head_w,
                head_b,
            },
            params,
        ))
    }

    pub fn decoder(&self) -> &ToyDecoder {
        &self.decoder
    }

    pub fn graph(&self) -> &DenseMat {
        &self.graph
    }

    pub fn n_items(&self) -> usize {
        self.graph.rows()
    }

    pub fn frozen_param_count(&self) -> usize {
        let seq = match &self.seq.items {
            SeqItems::Frozen(m) => m.len(),
            SeqItems::Trainable(_) => 0,
        };
        self.decoder.param_count() + seq
    }

    /// Trainable scalars over all model scalars. The pretrained item table
    /// is an input, not a model parameter, and is not counted.
    pub fn trainable_fraction(&self, params: &ParamSet) -> f64 {
        let t = params.scalar_count() as f64;
        t / (t + self.frozen_param_count() as f64)
    }

    fn check_history(&self, history: &[usize]) -> Result<()> {
        if let Some(&item) = history.iter().find(|&&i| i >= self.n_items()) {
            return Err(Error::UnknownItem {
                item,
                n_items: self.n_items(),
            });
        }
        Ok(())
    }

    /// Decoder input for a nonempty history, already truncated.
    fn prompt_tape<'a>(&'a self, tape: &mut Tape<'a>, params: &'a ParamSet, hist: &[usize], graph: Var) -> Result<Var> {
        let n = hist.len();
        let s = self.seq.forward_tape(tape, params, hist)?;
        let g = tape.gather_rows(graph, hist)?;
        let s = tape.repeat_rows(s, n)?;
        let z = tape.concat_cols(g, s)?;
        let injected = self.fusion.forward_tape(tape, params, z)?;
        let tokens = tape.constant_ref(self.decoder.tokens());
        let mut x = injected;
        if !self.template.head.is_empty() {
            let head = tape.gather_rows(tokens, &self.template.head)?;
            x = tape.concat_rows(head, x)?;
        }
        if !self.template.tail.is_empty() {
            let tail = tape.gather_rows(tokens, &self.template.tail)?;
            x = tape.concat_rows(x, tail)?;
        }
        let positions = tape.constant_ref(self.decoder.positions());
        let idx: Vec<usize> = (0..self.template.len() + n).collect();
        let p = tape.gather_rows(positions, &idx)?;
        tape.add(x, p)
    }

    pub fn build_prompt_sequence(&self, params: &ParamSet, history: &[usize]) -> Result<PromptSequence> {
        self.check_history(history)?;
        let hist = self.seq.truncate(history);
        if hist.is_empty() {
            return Err(Error::EmptyHistory(0));
        }
        let mut tape = Tape::new();
        let g = tape.constant_ref(&self.graph);
        let x = self.prompt_tape(&mut tape, params, hist, g)?;
        let (h, n) = (self.template.head.len(), hist.len());
        let total = self.template.len() + n;
        Ok(PromptSequence {
            embeddings: tape.value(x).clone(),
            injected: (0..total).map(|i| i >= h && i < h + n).collect(),
            positions: (0..total).collect(),
        })
    }

    /// `1×N` item logits for a nonempty history.
    pub fn logits_tape<'a>(&'a self, tape: &mut Tape<'a>, params: &'a ParamSet, history: &[usize]) -> Result<Var> {
        self.check_history(history)?;
        let hist = self.seq.truncate(history);
        if hist.is_empty() {
            return Err(Error::EmptyHistory(0));
        }
        let graph = tape.constant_ref(&self.graph);
        let x = self.prompt_tape(tape, params, hist, graph)?;
        let prefix = self.prefix.bundle_tape(tape, params, hist, graph)?;
        let h = self.decoder.forward_last(tape, x, &prefix.keys, &prefix.values)?;
        let w = tape.param(params, self.head_w);
        let b = tape.param(params, self.head_b);
        let y = tape.matmul(h, w)?;
        tape.add_row(y, b)
    }

    /// Item logits; an empty history yields the head bias and `true`.
    pub fn logits(&self, params: &ParamSet, history: &[usize]) -> Result<(Vec<f64>, bool)> {
        if history.is_empty() {
            return Ok((params.value(self.head_b).data().to_vec(), true));
        }
        let mut tape = Tape::new();
        let y = self.logits_tape(&mut tape, params, history)?;
        Ok((tape.value(y).data().to_vec(), false))
    }

    /// Mean cross-entropy over the batch, softmax over all `N` items.
    pub fn loss_tape<'a>(&'a self, tape: &mut Tape<'a>, params: &'a ParamSet, batch: &[Example]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::invalid("empty fine-tuning batch"));
        }
        let mut rows: Option<Var> = None;
        for ex in batch {
            if ex.label >= self.n_items() {
                return Err(Error::UnknownItem {
                    item: ex.label,
                    n_items: self.n_items(),
                });
            }
            let l = self.logits_tape(tape, params, &ex.history)?;
            rows = Some(match rows {
                None => l,
                Some(r) => tape.concat_rows(r, l)?,
            });
        }
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let ce = tape.softmax_cross_entropy(rows.expect("nonempty batch"), &labels)?;
        Ok(tape.scale(ce, 1.0 / batch.len() as f64))
    }

    pub fn loss(&self, params: &ParamSet, batch: &[Example]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_tape(&mut tape, params, batch)?;
        Ok(tape.scalar(l))
    }

    /// Top `keep` items by logit, lower index first on ties, skipping the
    /// sorted `exclude` list.
    pub fn predict_next_item(
        &self,
        params: &ParamSet,
        history: &[usize],
        exclude: &[usize],
        keep: usize,
    ) -> Result<Prediction> {
        let (logits, cold) = self.logits(params, history)?;
        let lse = math::log_sum_exp(&logits);
        let items = rank_items(&logits, exclude, keep);
        let scores = items.iter().map(|&i| math::exp(logits[i] - lse)).collect();
        Ok(Prediction { items, scores, cold })
    }
}

/// One Adam update of the trainable set; returns the pre-update loss.
pub fn finetune_step(model: &FineTuneModel, params: &mut ParamSet, adam: &mut Adam, batch: &[Example]) -> Result<f64> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let l = model.loss_tape(&mut tape, params, batch)?;
        let loss = tape.scalar(l);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "fine-tuning loss",
                row: batch[0].user,
                col: batch.len(),
            });
        }
        (loss, tape.backward(l, params))
    };
    params.zero_grads();
    params.accumulate(&grads);
    adam.step(params);
    Ok(loss)
}

/// Next-item examples from each user's training sequence: every proper
/// prefix of the sequence predicts the item that follows it.
pub fn finetune_examples(split: &SplitSet, max_len: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for (user, seq) in split.train_sequences().into_iter().enumerate() {
        for t in 1..seq.len() {
            let start = t.saturating_sub(max_len);
            out.push(Example {
                user,
                history: seq[start..t].to_vec(),
                label: seq[t],
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    /// Mean pre-update batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub adam: Adam,
}

/// `config.epochs` passes over shuffled `examples` in batches of
/// `config.batch_size`.
pub fn train_finetune(model: &FineTuneModel, params: &mut ParamSet, examples: &[Example]) -> Result<FineTuneOutcome> {
    if examples.is_empty() {
        return Err(Error::invalid("no fine-tuning examples"));
    }
    let cfg = &model.config;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            sum += finetune_step(model, params, &mut adam, &batch)?;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(FineTuneOutcome { epoch_losses, adam })
}

/// Test-split metrics. The model sees the training sequence plus the
/// validation item; training items are excluded from ranking.
pub fn evaluate_finetuned(model: &FineTuneModel, params: &ParamSet, split: &SplitSet, ks: &[usize]) -> Result<RankMetrics> {
    let keep = ks.iter().copied().max().unwrap_or(0);
    let seqs = split.train_sequences();
    let train_items = split.train_items();
    let mut rankings = BTreeMap::new();
    for &u in split.test.keys() {
        let mut history = seqs[u].clone();
        if let Some(&v) = split.valid.get(&u) {
            history.push(v);
        }
        let p = model.predict_next_item(params, &history, &train_items[u], keep)?;
        rankings.insert(u, p.items);
    }
    rank_metrics(&rankings, &split.test, ks)
}
