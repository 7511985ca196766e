//! The subcommands as library calls.
//!
//! A dataset directory holds `interactions.tsv`, optional `user_ids.tsv`
//! and `item_ids.tsv` fixing the id universes, and one `<modality>.feat`
//! per configured modality whose rows follow the item map. Every command
//! writing a directory also writes `config.txt` (the resolved
//! configuration) and `manifest.txt` (tool, version, dataset digest).

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use hyperrec_core::eval::{leave_last_out_split, RankMetrics, SplitSet};
use hyperrec_core::hypergraph::{self, Incidence};
use hyperrec_core::ingest::{dataset_stats, synth_block_model, DatasetStats, ModalFeatureSet};
use hyperrec_core::pretrain::{evaluate_embeddings, train_pretrain, EmbeddingState, PretrainGraphs};
use hyperrec_core::toyllm::{evaluate_finetuned, finetune_examples, train_finetune, FineTuneModel, Template};
use hyperrec_core::{DenseMat, SparseCsr};
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{self, Checkpoint};
use crate::report::{self, PredictionRow};
use crate::tsv::{self, IdMap, LoadedInteractions};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const KS: [usize; 2] = [10, 20];

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const USER_IDS_FILE: &str = "user_ids.tsv";
pub const ITEM_IDS_FILE: &str = "item_ids.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ITEM_EMBEDDINGS_FILE: &str = "item_graph.fe64";
pub const USER_EMBEDDINGS_FILE: &str = "user_graph.fe64";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const FINETUNE_HISTORY_FILE: &str = "finetune_history.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub interactions: LoadedInteractions,
    pub modalities: Vec<ModalFeatureSet>,
    /// SHA-256 over every file read, in load order.
    pub digest: String,
}

fn feature_path(dir: &Path, modality: &str) -> PathBuf {
    dir.join(format!("{modality}.feat"))
}

fn digest_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    for p in paths {
        let mut f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
        loop {
            let n = f.read(&mut buf).map_err(|e| Error::io(p, e))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(hex(&h.finalize()))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg
        .data
        .as_deref()
        .ok_or_else(|| Error::Config(vec!["no dataset directory given (--data or data=)".into()]))?;
    let mut read = vec![dir.join(INTERACTIONS_FILE)];
    let fixed = |name: &str, read: &mut Vec<PathBuf>| -> Result<Option<IdMap>> {
        let p = dir.join(name);
        if !p.exists() {
            return Ok(None);
        }
        let m = IdMap::read(&p)?;
        read.push(p);
        Ok(Some(m))
    };
    let users = fixed(USER_IDS_FILE, &mut read)?;
    let items = fixed(ITEM_IDS_FILE, &mut read)?;
    let interactions = tsv::load_interactions_with(&read[0], users.as_ref(), items.as_ref())?;
    let mut modalities = Vec::new();
    if cfg.pretrain.use_i2i {
        for m in &cfg.modalities {
            let p = feature_path(dir, m);
            modalities.push(formats::read_features(&p, m, interactions.log.n_items())?);
            read.push(p);
        }
    }
    let name = if cfg.dataset.is_empty() {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    } else {
        cfg.dataset.clone()
    };
    Ok(Dataset {
        name,
        interactions,
        modalities,
        digest: digest_files(&read)?,
    })
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Writes `config.txt` and `manifest.txt` into `out`.
pub fn write_run_metadata(out: &Path, command: &str, cfg: &RunConfig, dataset: &str, digest: &str) -> Result<()> {
    report::write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    let manifest = format!(
        "tool={TOOL}\nversion={VERSION}\ncommand={command}\ndataset={dataset}\ndataset_sha256={digest}\nconfig_sha256={}\n",
        cfg.hash()
    );
    report::write_text(&out.join(MANIFEST_FILE), &manifest)
}

/// Parses a `key=value` manifest.
pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect())
}

/// Generates a planted-block dataset into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<DatasetStats> {
    ensure_dir(out)?;
    let bm = cfg.block_model();
    let d = synth_block_model(&bm)?;
    let users = IdMap::identity(bm.n_users);
    let items = IdMap::identity(bm.n_items);
    let mut written = vec![out.join(INTERACTIONS_FILE), out.join(USER_IDS_FILE), out.join(ITEM_IDS_FILE)];
    tsv::write_interactions(&written[0], &d.log, &users, &items)?;
    users.write(&written[1])?;
    items.write(&written[2])?;
    for m in [&d.text, &d.visual] {
        let p = feature_path(out, m.modality());
        formats::write_features(&p, m.features())?;
        written.push(p);
    }
    let name = if cfg.dataset.is_empty() { "synthetic" } else { &cfg.dataset };
    write_run_metadata(out, "synth", cfg, name, &digest_files(&written)?)?;
    Ok(dataset_stats(&d.log))
}

pub fn stats(interactions: &Path) -> Result<DatasetStats> {
    Ok(dataset_stats(&tsv::load_interactions(interactions)?.log))
}

/// `users=… items=… interactions=… sparsity=…%` with sparsity to three decimals.
pub fn format_stats(s: &DatasetStats) -> String {
    format!(
        "users={} items={} interactions={} sparsity={:.3}%",
        s.users,
        s.items,
        s.interactions,
        s.sparsity_percent()
    )
}

/// Sparse structure for one run, plus the per-modality KNN graphs.
pub struct BuiltGraphs {
    pub graphs: PretrainGraphs,
    pub knn: Vec<(String, SparseCsr)>,
}

pub fn build_graphs_for(cfg: &RunConfig, ds: &Dataset, split: &SplitSet) -> Result<BuiltGraphs> {
    let p = &cfg.pretrain;
    let a: Incidence = hypergraph::build_interaction_matrix(&split.train);
    let u2u = if p.use_u2u {
        Some(hypergraph::build_hypergraph_operator(&a)?)
    } else {
        None
    };
    let mut knn = Vec::new();
    for m in &ds.modalities {
        knn.push((m.modality().to_owned(), hypergraph::knn_modal_graph(m, p.knn_k)?.matrix));
    }
    let i2i = if p.use_i2i {
        let mats: Vec<SparseCsr> = knn.iter().map(|(_, g)| g.clone()).collect();
        Some(hypergraph::build_hypergraph_operator(&hypergraph::concat_modalities(&mats)?)?)
    } else {
        None
    };
    Ok(BuiltGraphs {
        graphs: PretrainGraphs::from_parts(a, u2u, i2i, p.lightgcn_layers),
        knn,
    })
}

/// Serializes every operator, returning the written file names.
pub fn build_graphs(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let ds = load_dataset(cfg)?;
    let split = leave_last_out_split(&ds.interactions.log);
    let built = build_graphs_for(cfg, &ds, &split)?;
    ensure_dir(out)?;
    let k = cfg.pretrain.knn_k;
    let mut files = vec![(
        "interactions_user_train.csr".to_owned(),
        &built.graphs.interactions.matrix,
    )];
    if let Some(op) = &built.graphs.u2u {
        files.push(("u2u_user_interactions.csr".into(), &op.matrix));
    }
    for (m, g) in &built.knn {
        files.push((format!("knn_item_k{k}_{m}.csr"), g));
    }
    if let Some(op) = &built.graphs.i2i {
        files.push((format!("i2i_item_k{k}_{}.csr", cfg.modalities.join("+")), &op.matrix));
    }
    for (name, m) in &files {
        formats::write_csr(&out.join(name), m)?;
    }
    write_run_metadata(out, "build-graphs", cfg, &ds.name, &ds.digest)?;
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub test: RankMetrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub fused_item: DenseMat,
}

/// Trains and evaluates without writing anything.
pub fn pretrain_in_memory(cfg: &RunConfig, ds: &Dataset) -> Result<(PretrainReport, hyperrec_core::pretrain::PretrainOutcome, PretrainGraphs)> {
    let split = leave_last_out_split(&ds.interactions.log);
    let graphs = build_graphs_for(cfg, ds, &split)?.graphs;
    let outcome = train_pretrain(&graphs, &split.valid, &cfg.pretrain)?;
    let derived = outcome.state.derive(&graphs)?;
    let test = evaluate_embeddings(&derived, &graphs, &split.test, &KS)?;
    log::info!(
        "pretrain: best epoch {} of {}, test R@20 {:.4}",
        outcome.best_epoch,
        outcome.history.len(),
        test.recall[1]
    );
    Ok((
        PretrainReport {
            test,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            fused_item: derived.fused_item,
        },
        outcome,
        graphs,
    ))
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainReport> {
    let ds = load_dataset(cfg)?;
    let (rep, outcome, graphs) = pretrain_in_memory(cfg, &ds)?;
    ensure_dir(out)?;
    let derived = outcome.state.derive(&graphs)?;
    let mut ck = Checkpoint::capture(&outcome.state.params, Some(&outcome.adam), outcome.best_epoch as u64);
    ck.meta.insert("kind".into(), "pretrain".into());
    ck.meta.insert("config_sha256".into(), cfg.hash());
    ck.write(&out.join(CHECKPOINT_FILE))?;
    formats::write_embeddings(&out.join(ITEM_EMBEDDINGS_FILE), &derived.fused_item)?;
    formats::write_embeddings(&out.join(USER_EMBEDDINGS_FILE), &derived.fused_user)?;
    report::write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    report::write_metrics(&out.join(METRICS_FILE), "pretrain", &ds.name, &rep.test)?;
    write_run_metadata(out, "pretrain", cfg, &ds.name, &ds.digest)?;
    Ok(rep)
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub test: RankMetrics,
    pub epoch_losses: Vec<f64>,
    pub trainable_fraction: f64,
    pub decoder_checksum: u64,
}

fn finetune_model(cfg: &RunConfig, graph: DenseMat) -> Result<(FineTuneModel, hyperrec_core::numerics::ParamSet)> {
    let frozen = cfg.ft_freeze_seq_items.then(|| graph.clone());
    Ok(FineTuneModel::new(cfg.finetune_config(), graph, Template::default(), frozen)?)
}

fn read_graph_table(dir: &Path, n_items: usize) -> Result<DenseMat> {
    let p = dir.join(ITEM_EMBEDDINGS_FILE);
    let g = formats::read_embeddings(&p)?;
    if g.rows() != n_items {
        return Err(Error::format(
            &p,
            format!("{} embedding rows, dataset has {n_items} items", g.rows()),
        ));
    }
    Ok(g)
}

pub fn finetune(cfg: &RunConfig, out: &Path) -> Result<FinetuneReport> {
    let pre = cfg
        .pretrained
        .as_deref()
        .ok_or_else(|| Error::Config(vec!["no pretraining run given (--pretrained or pretrained=)".into()]))?;
    let ds = load_dataset(cfg)?;
    let log = &ds.interactions.log;
    let graph = read_graph_table(pre, log.n_items())?;
    let split = leave_last_out_split(log);
    let (model, mut params) = finetune_model(cfg, graph.clone())?;
    let checksum = model.decoder().checksum();
    let examples = finetune_examples(&split, cfg.ft_seq_max_len);
    let outcome = train_finetune(&model, &mut params, &examples)?;
    debug_assert_eq!(model.decoder().checksum(), checksum);
    let test = evaluate_finetuned(&model, &params, &split, &KS)?;
    let fraction = model.trainable_fraction(&params);
    log::info!(
        "finetune: {} examples, trainable fraction {:.4}, test R@20 {:.4}",
        examples.len(),
        fraction,
        test.recall[1]
    );

    ensure_dir(out)?;
    formats::write_embeddings(&out.join(ITEM_EMBEDDINGS_FILE), &graph)?;
    let mut ck = Checkpoint::capture(&params, Some(&outcome.adam), outcome.epoch_losses.len() as u64);
    ck.meta.insert("kind".into(), "finetune".into());
    ck.meta.insert("config_sha256".into(), cfg.hash());
    ck.meta.insert("decoder_seed".into(), cfg.decoder.seed.to_string());
    ck.meta.insert("decoder_checksum".into(), format!("{checksum:016x}"));
    ck.write(&out.join(CHECKPOINT_FILE))?;

    let seqs = split.train_sequences();
    let train_items = split.train_items();
    let mut rows = Vec::new();
    for &u in split.test.keys() {
        let mut history = seqs[u].clone();
        history.extend(split.valid.get(&u));
        let p = model.predict_next_item(&params, &history, &train_items[u], KS[1])?;
        for (r, (&item, &score)) in p.items.iter().zip(&p.scores).enumerate() {
            rows.push(PredictionRow {
                user: ds.interactions.users.original(u).to_owned(),
                rank: r + 1,
                item: ds.interactions.items.original(item).to_owned(),
                score,
            });
        }
    }
    report::write_predictions(&out.join(PREDICTIONS_FILE), &rows)?;
    let hist: String = std::iter::once("epoch,loss\n".to_owned())
        .chain(outcome.epoch_losses.iter().enumerate().map(|(e, l)| format!("{},{l}\n", e + 1)))
        .collect();
    report::write_text(&out.join(FINETUNE_HISTORY_FILE), &hist)?;
    report::write_metrics(&out.join(METRICS_FILE), "finetune", &ds.name, &test)?;
    write_run_metadata(out, "finetune", cfg, &ds.name, &ds.digest)?;
    Ok(FinetuneReport {
        test,
        epoch_losses: outcome.epoch_losses,
        trainable_fraction: fraction,
        decoder_checksum: checksum,
    })
}

/// Re-evaluates a pretraining or fine-tuning run from its checkpoint.
/// `cfg` is the run's resolved configuration, possibly with overrides.
pub fn evaluate(cfg: &RunConfig, run: &Path) -> Result<(String, RankMetrics)> {
    let manifest = read_manifest(run)?;
    let command = manifest.get("command").map(String::as_str).unwrap_or("");
    let ck = Checkpoint::read(&run.join(CHECKPOINT_FILE))?;
    let ds = load_dataset(cfg)?;
    let log = &ds.interactions.log;
    let split = leave_last_out_split(log);
    let bad = |msg: String| Error::format(run.join(CHECKPOINT_FILE), msg);
    let metrics = match command {
        "pretrain" => {
            let graphs = build_graphs_for(cfg, &ds, &split)?.graphs;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let mut state = EmbeddingState::init(log.n_users(), log.n_items(), &cfg.pretrain, &mut rng);
            ck.restore(&mut state.params).map_err(bad)?;
            evaluate_embeddings(&state.derive(&graphs)?, &graphs, &split.test, &KS)?
        }
        "finetune" => {
            let graph = read_graph_table(run, log.n_items())?;
            let (model, mut params) = finetune_model(cfg, graph)?;
            ck.restore(&mut params).map_err(bad)?;
            evaluate_finetuned(&model, &params, &split, &KS)?
        }
        other => {
            return Err(Error::format(
                run.join(MANIFEST_FILE),
                format!("cannot evaluate a `{other}` run"),
            ))
        }
    };
    report::write_metrics(&run.join(METRICS_FILE), command, &ds.name, &metrics)?;
    Ok((command.to_owned(), metrics))
}

/// Test metrics of one pretraining run per value of `param`.
pub fn sweep(cfg: &RunConfig, param: &str, values: &[String], out: &Path) -> Result<Vec<(String, RankMetrics)>> {
    let mut points = Vec::with_capacity(values.len());
    let mut errors = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        match c.set(param, v) {
            Ok(()) => {
                errors.extend(c.violations().into_iter().map(|e| format!("{param}={v}: {e}")));
                points.push(c);
            }
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let ds = load_dataset(cfg)?;
    let run = |c: &RunConfig| pretrain_in_memory(c, &ds).map(|(r, ..)| r.test);
    let mut results: Vec<Option<Result<RankMetrics>>> = (0..points.len()).map(|_| None).collect();
    for (chunk, slots) in points.chunks(cfg.jobs).zip(results.chunks_mut(cfg.jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(|| run(c))).collect();
            for (slot, h) in slots.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("sweep worker panicked"));
            }
        });
    }
    let mut rows = Vec::with_capacity(values.len());
    for (v, r) in values.iter().zip(results) {
        rows.push((v.clone(), r.expect("every point ran")?));
    }
    ensure_dir(out)?;
    report::write_sweep(&out.join(SWEEP_FILE), param, &rows)?;
    write_run_metadata(out, "sweep", cfg, &ds.name, &ds.digest)?;
    Ok(rows)
}
