//! CSV and TSV reports.

use std::io::Write;
use std::path::Path;

use hyperrec_core::eval::RankMetrics;
use hyperrec_core::pretrain::EpochRecord;

use crate::error::{Error, Result};
use crate::tsv::create;

pub const HISTORY_HEADER: &str = "epoch,loss_total,loss_bpr,loss_u2u,loss_i2i,val_r20";
pub const METRICS_HEADER: &str = "model,dataset,R@10,N@10,R@20,N@20";
pub const PREDICTIONS_HEADER: &str = "user\trank\titem\tscore";

fn save(path: &Path, body: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.loss_total, r.loss_bpr, r.loss_u2u, r.loss_i2i, r.val_r20
        ));
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    save(path, &history_csv(history))
}

/// `R@10,N@10,R@20,N@20`; cutoffs missing from `m` are written as `nan`.
pub fn metric_cells(m: &RankMetrics) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "nan".to_owned(), |x| format!("{x:.6}"));
    format!(
        "{},{},{},{}",
        cell(m.recall_at(10)),
        cell(m.ndcg_at(10)),
        cell(m.recall_at(20)),
        cell(m.ndcg_at(20))
    )
}

pub fn metrics_csv(rows: &[(&str, &str, &RankMetrics)]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (model, dataset, m) in rows {
        s.push_str(&format!("{model},{dataset},{}\n", metric_cells(m)));
    }
    s
}

pub fn write_metrics(path: &Path, model: &str, dataset: &str, m: &RankMetrics) -> Result<()> {
    save(path, &metrics_csv(&[(model, dataset, m)]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub user: String,
    pub rank: usize,
    pub item: String,
    pub score: f64,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut s = format!("{PREDICTIONS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", r.user, r.rank, r.item, r.score));
    }
    save(path, &s)
}

pub fn write_sweep(path: &Path, param: &str, rows: &[(String, RankMetrics)]) -> Result<()> {
    let mut s = "param,value,R@10,N@10,R@20,N@20\n".to_owned();
    for (value, m) in rows {
        s.push_str(&format!("{param},{value},{}\n", metric_cells(m)));
    }
    save(path, &s)
}

pub(crate) fn write_text(path: &Path, body: &str) -> Result<()> {
    save(path, body)
}
