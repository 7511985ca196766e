//! `key=value` run configuration.
//!
//! A file holds one `key = value` pair per line; `#` starts a comment.
//! Resolution order is defaults, then the file, then `HELLM_SEED`, then
//! each `--set key=value` in order. Every problem found along the way is
//! collected and reported together.

use std::path::{Path, PathBuf};

use hyperrec_core::graphprefix::PoolConfig;
use hyperrec_core::ingest::BlockModel;
use hyperrec_core::pretrain::{NegativeScope, PretrainConfig};
use hyperrec_core::toyllm::{DecoderConfig, FineTuneConfig};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "HELLM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pretrain: PretrainConfig,
    pub pool: PoolConfig,
    pub decoder: DecoderConfig,
    pub ft_lr: f64,
    pub ft_batch_size: usize,
    pub ft_epochs: usize,
    pub ft_seq_max_len: usize,
    /// Use the exported item embeddings as a frozen sequence-encoder table.
    pub ft_freeze_seq_items: bool,
    pub synth: BlockModel,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Pretraining run directory consumed by fine-tuning.
    pub pretrained: Option<PathBuf>,
    /// Name written into metric reports; the data directory name if empty.
    pub dataset: String,
    /// Feature files `<data>/<modality>.feat`, in this order.
    pub modalities: Vec<String>,
    /// Sweep points evaluated concurrently.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ft = FineTuneConfig::default();
        RunConfig {
            pretrain: PretrainConfig::default(),
            pool: ft.pool,
            decoder: ft.decoder,
            ft_lr: ft.lr,
            ft_batch_size: ft.batch_size,
            ft_epochs: ft.epochs,
            ft_seq_max_len: ft.seq_max_len,
            ft_freeze_seq_items: false,
            synth: BlockModel::toy(0),
            data: None,
            pretrained: None,
            dataset: String::new(),
            modalities: vec!["text".into(), "visual".into()],
            jobs: 1,
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "alpha",
    "beta",
    "lambda",
    "tau",
    "lr",
    "batch_size",
    "dim",
    "knn_k",
    "layers",
    "lightgcn_layers",
    "max_epochs",
    "patience",
    "seed",
    "negatives",
    "use_u2u",
    "use_i2i",
    "trainable_transform",
    "pool.d_pooled",
    "pool.prefix_len",
    "decoder.layers",
    "decoder.d_model",
    "decoder.heads",
    "decoder.ffn",
    "decoder.vocab",
    "decoder.max_positions",
    "decoder.seed",
    "ft.lr",
    "ft.batch_size",
    "ft.epochs",
    "ft.seq_max_len",
    "ft.freeze_seq_items",
    "synth.n_users",
    "synth.n_items",
    "synth.n_blocks",
    "synth.p_in",
    "synth.p_out",
    "synth.feat_dim",
    "synth.noise",
    "data",
    "pretrained",
    "dataset",
    "modalities",
    "jobs",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("{key}: cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn boolean(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{v}`")),
    }
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let p = &mut self.pretrain;
        match key {
            "alpha" => p.alpha = num(key, v)?,
            "beta" => p.beta = num(key, v)?,
            "lambda" => p.lambda = num(key, v)?,
            "tau" => p.tau = num(key, v)?,
            "lr" => p.lr = num(key, v)?,
            "batch_size" => p.batch_size = num(key, v)?,
            "dim" => p.dim = num(key, v)?,
            "knn_k" | "topk" => p.knn_k = num(key, v)?,
            "layers" => p.layers = num(key, v)?,
            "lightgcn_layers" => p.lightgcn_layers = num(key, v)?,
            "max_epochs" => p.max_epochs = num(key, v)?,
            "patience" => p.patience = num(key, v)?,
            "seed" => p.seed = num(key, v)?,
            "negatives" => {
                p.negatives = match v {
                    "full" => NegativeScope::Full,
                    "in_batch" => NegativeScope::InBatch,
                    _ => return Err(format!("negatives: expected full or in_batch, got `{v}`")),
                }
            }
            "use_u2u" => p.use_u2u = boolean(key, v)?,
            "use_i2i" => p.use_i2i = boolean(key, v)?,
            "trainable_transform" => p.trainable_transform = boolean(key, v)?,
            "pool.d_pooled" => self.pool.d_pooled = num(key, v)?,
            "pool.prefix_len" => self.pool.prefix_len = num(key, v)?,
            "decoder.layers" => self.decoder.layers = num(key, v)?,
            "decoder.d_model" => self.decoder.d_model = num(key, v)?,
            "decoder.heads" => self.decoder.heads = num(key, v)?,
            "decoder.ffn" => self.decoder.ffn = num(key, v)?,
            "decoder.vocab" => self.decoder.vocab = num(key, v)?,
            "decoder.max_positions" => self.decoder.max_positions = num(key, v)?,
            "decoder.seed" => self.decoder.seed = num(key, v)?,
            "ft.lr" => self.ft_lr = num(key, v)?,
            "ft.batch_size" => self.ft_batch_size = num(key, v)?,
            "ft.epochs" => self.ft_epochs = num(key, v)?,
            "ft.seq_max_len" => self.ft_seq_max_len = num(key, v)?,
            "ft.freeze_seq_items" => self.ft_freeze_seq_items = boolean(key, v)?,
            "synth.n_users" => self.synth.n_users = num(key, v)?,
            "synth.n_items" => self.synth.n_items = num(key, v)?,
            "synth.n_blocks" => self.synth.n_blocks = num(key, v)?,
            "synth.p_in" => self.synth.p_in = num(key, v)?,
            "synth.p_out" => self.synth.p_out = num(key, v)?,
            "synth.feat_dim" => self.synth.feat_dim = num(key, v)?,
            "synth.noise" => self.synth.noise = num(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "pretrained" => self.pretrained = (!v.is_empty()).then(|| PathBuf::from(v)),
            "dataset" => self.dataset = v.to_owned(),
            "modalities" => {
                self.modalities = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "jobs" => self.jobs = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Value of `key` as it would be serialized.
    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.pretrain;
        let path = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "alpha" => p.alpha.to_string(),
            "beta" => p.beta.to_string(),
            "lambda" => p.lambda.to_string(),
            "tau" => p.tau.to_string(),
            "lr" => p.lr.to_string(),
            "batch_size" => p.batch_size.to_string(),
            "dim" => p.dim.to_string(),
            "knn_k" | "topk" => p.knn_k.to_string(),
            "layers" => p.layers.to_string(),
            "lightgcn_layers" => p.lightgcn_layers.to_string(),
            "max_epochs" => p.max_epochs.to_string(),
            "patience" => p.patience.to_string(),
            "seed" => p.seed.to_string(),
            "negatives" => match p.negatives {
                NegativeScope::Full => "full".into(),
                NegativeScope::InBatch => "in_batch".into(),
            },
            "use_u2u" => p.use_u2u.to_string(),
            "use_i2i" => p.use_i2i.to_string(),
            "trainable_transform" => p.trainable_transform.to_string(),
            "pool.d_pooled" => self.pool.d_pooled.to_string(),
            "pool.prefix_len" => self.pool.prefix_len.to_string(),
            "decoder.layers" => self.decoder.layers.to_string(),
            "decoder.d_model" => self.decoder.d_model.to_string(),
            "decoder.heads" => self.decoder.heads.to_string(),
            "decoder.ffn" => self.decoder.ffn.to_string(),
            "decoder.vocab" => self.decoder.vocab.to_string(),
            "decoder.max_positions" => self.decoder.max_positions.to_string(),
            "decoder.seed" => self.decoder.seed.to_string(),
            "ft.lr" => self.ft_lr.to_string(),
            "ft.batch_size" => self.ft_batch_size.to_string(),
            "ft.epochs" => self.ft_epochs.to_string(),
            "ft.seq_max_len" => self.ft_seq_max_len.to_string(),
            "ft.freeze_seq_items" => self.ft_freeze_seq_items.to_string(),
            "synth.n_users" => self.synth.n_users.to_string(),
            "synth.n_items" => self.synth.n_items.to_string(),
            "synth.n_blocks" => self.synth.n_blocks.to_string(),
            "synth.p_in" => self.synth.p_in.to_string(),
            "synth.p_out" => self.synth.p_out.to_string(),
            "synth.feat_dim" => self.synth.feat_dim.to_string(),
            "synth.noise" => self.synth.noise.to_string(),
            "data" => path(&self.data),
            "pretrained" => path(&self.pretrained),
            "dataset" => self.dataset.clone(),
            "modalities" => self.modalities.join(","),
            "jobs" => self.jobs.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines, collecting every problem with its line.
    pub fn apply_text(&mut self, text: &str, errors: &mut Vec<String>, origin: &str) {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                None => errors.push(format!("{origin}:{}: expected key=value, got `{line}`", n + 1)),
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        errors.push(format!("{origin}:{}: {e}", n + 1));
                    }
                }
            }
        }
    }

    /// Defaults, then `file`, then `env_seed`, then `sets`, then validation.
    pub fn resolve(file: Option<&Path>, sets: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &mut errors, &path.display().to_string());
        }
        if let Some(seed) = env_seed {
            if let Err(e) = cfg.set("seed", seed.trim()) {
                errors.push(format!("{SEED_ENV}: {e}"));
            }
        }
        for s in sets {
            match s.split_once('=') {
                None => errors.push(format!("--set {s}: expected key=value")),
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        errors.push(format!("--set: {e}"));
                    }
                }
            }
        }
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.pretrain.violations();
        if let Err(e) = self.pool_config().validate() {
            v.push(e.to_string());
        }
        if let Err(e) = self.decoder.validate() {
            v.push(e.to_string());
        }
        if !(self.ft_lr > 0.0) || !self.ft_lr.is_finite() {
            v.push(format!("ft.lr must be > 0, got {}", self.ft_lr));
        }
        if self.ft_batch_size == 0 {
            v.push("ft.batch_size must be >= 1".into());
        }
        if self.ft_seq_max_len == 0 {
            v.push("ft.seq_max_len must be >= 1".into());
        }
        let s = &self.synth;
        if !(0.0 <= s.p_out && s.p_out < s.p_in && s.p_in <= 1.0) {
            v.push(format!(
                "synth probabilities need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                s.p_in, s.p_out
            ));
        }
        if s.n_blocks == 0 || !s.n_users.is_multiple_of(s.n_blocks) || !s.n_items.is_multiple_of(s.n_blocks) {
            v.push(format!(
                "synth.n_blocks={} must divide synth.n_users={} and synth.n_items={}",
                s.n_blocks, s.n_users, s.n_items
            ));
        }
        if self.pretrain.use_i2i && self.modalities.is_empty() {
            v.push("use_i2i needs at least one modality".into());
        }
        if self.jobs == 0 {
            v.push("jobs must be >= 1".into());
        }
        v
    }

    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            d: self.pretrain.dim,
            d_model: self.decoder.d_model,
            layers: self.decoder.layers,
            ..self.pool
        }
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            pool: self.pool_config(),
            decoder: self.decoder,
            seq_max_len: self.ft_seq_max_len,
            lr: self.ft_lr,
            batch_size: self.ft_batch_size,
            epochs: self.ft_epochs,
            seed: self.pretrain.seed,
        }
    }

    pub fn block_model(&self) -> BlockModel {
        BlockModel {
            seed: self.pretrain.seed,
            ..self.synth
        }
    }

    /// Resolved configuration, one `key=value` line per key.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
