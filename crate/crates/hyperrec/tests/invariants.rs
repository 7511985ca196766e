use std::path::Path;

use hyperrec::pipeline;
use hyperrec::tsv::{load_interactions, IdMap};
use hyperrec::RunConfig;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn raw_ids() -> impl Strategy<Value = Vec<String>> {
    prop_oneof![
        proptest::collection::vec((-500i64..500).prop_map(|v| v.to_string()), 0..30),
        proptest::collection::vec("[a-z0-9]{1,6}", 0..30),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn id_remap_is_a_bijection(ids in raw_ids()) {
        let m = IdMap::from_ids(ids.iter().cloned());
        for id in &ids {
            let d = m.dense(id).unwrap();
            prop_assert_eq!(m.original(d), id.as_str());
        }
        for d in 0..m.len() {
            prop_assert_eq!(m.dense(m.original(d)), Some(d));
        }
        let mut distinct = ids.clone();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(m.len(), distinct.len());
        // the map depends on the id set only
        let mut shuffled = ids.clone();
        shuffled.reverse();
        prop_assert_eq!(IdMap::from_ids(shuffled), m);
    }

    #[test]
    fn stats_ignore_line_order(
        recs in proptest::collection::vec((0u8..12, 0u8..9, 0i64..5), 0..60),
        seed in any::<u64>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut lines: Vec<String> = recs.iter().map(|(u, i, t)| format!("u{u}\ti{i}\t{t}\n")).collect();
        let a = write(dir.path(), "a.tsv", &lines);
        lines.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = write(dir.path(), "b.tsv", &lines);
        let la = load_interactions(&a).unwrap();
        let lb = load_interactions(&b).unwrap();
        prop_assert_eq!(pipeline::stats(&a).unwrap(), pipeline::stats(&b).unwrap());
        prop_assert_eq!(la, lb);
    }
}

fn write(dir: &Path, name: &str, lines: &[String]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, lines.concat()).unwrap();
    p
}

fn quick(data: &Path) -> RunConfig {
    let sets = [
        format!("data={}", data.display()),
        "lr=0.01".into(),
        "max_epochs=15".into(),
        "ft.epochs=1".into(),
        "dim=16".into(),
        "pool.d_pooled=4".into(),
    ];
    RunConfig::resolve(None, &sets, None).unwrap()
}

#[test]
fn identical_inputs_give_identical_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    let cfg = quick(&data);
    pipeline::synth(&cfg, &data).unwrap();
    let mut ft = cfg.clone();
    ft.pretrained = Some(dir.path().join("a"));
    for run in ["a", "b"] {
        pipeline::pretrain(&cfg, &dir.path().join(run)).unwrap();
        pipeline::finetune(&ft, &dir.path().join(format!("{run}-ft"))).unwrap();
    }
    for f in [pipeline::METRICS_FILE, pipeline::HISTORY_FILE, pipeline::CHECKPOINT_FILE] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    for f in [pipeline::METRICS_FILE, pipeline::PREDICTIONS_FILE, pipeline::CHECKPOINT_FILE] {
        let a = std::fs::read(dir.path().join("a-ft").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b-ft").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn every_run_directory_is_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    let cfg = quick(&data);
    pipeline::synth(&cfg, &data).unwrap();
    let pre = dir.path().join("pre");
    let graphs = dir.path().join("graphs");
    pipeline::pretrain(&cfg, &pre).unwrap();
    let files = pipeline::build_graphs(&cfg, &graphs).unwrap();
    assert!(files.iter().any(|f| f == "i2i_item_k5_text+visual.csr"));
    let synth_digest = pipeline::read_manifest(&data).unwrap()["dataset_sha256"].clone();
    for d in [&data, &pre, &graphs] {
        let m = pipeline::read_manifest(d).unwrap();
        assert_eq!(m["tool"], "hyperrec");
        assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
        assert_eq!(m["dataset_sha256"].len(), 64);
        let text = std::fs::read_to_string(d.join(pipeline::CONFIG_FILE)).unwrap();
        let mut back = RunConfig::default();
        let mut errs = Vec::new();
        back.apply_text(&text, &mut errs, "config");
        assert!(errs.is_empty());
        assert_eq!(m["config_sha256"], back.hash());
    }
    // synth hashes what it wrote; loaders hash what they read, in the same order
    assert_eq!(pipeline::read_manifest(&pre).unwrap()["dataset_sha256"], synth_digest);
    let header = std::fs::read_to_string(pre.join(pipeline::HISTORY_FILE)).unwrap();
    assert!(header.starts_with("epoch,loss_total,loss_bpr,loss_u2u,loss_i2i,val_r20\n"));
    let u2u = hyperrec::formats::read_csr(&graphs.join("u2u_user_interactions.csr")).unwrap();
    assert!(u2u.is_symmetric(1e-12));
}

#[test]
fn evaluation_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    let cfg = quick(&data);
    pipeline::synth(&cfg, &data).unwrap();
    let pre = dir.path().join("pre");
    let rep = pipeline::pretrain(&cfg, &pre).unwrap();
    let before = std::fs::read(pre.join(pipeline::METRICS_FILE)).unwrap();
    let (kind, m) = pipeline::evaluate(&cfg, &pre).unwrap();
    assert_eq!(kind, "pretrain");
    assert_eq!(m, rep.test);
    assert_eq!(std::fs::read(pre.join(pipeline::METRICS_FILE)).unwrap(), before);

    let mut ft = cfg.clone();
    ft.pretrained = Some(pre);
    let ft_dir = dir.path().join("ft");
    let frep = pipeline::finetune(&ft, &ft_dir).unwrap();
    assert!(frep.trainable_fraction < 0.05);
    let (kind, m) = pipeline::evaluate(&ft, &ft_dir).unwrap();
    assert_eq!(kind, "finetune");
    assert_eq!(m, frep.test);
}

#[test]
fn exported_item_table_has_one_row_per_item() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    let cfg = quick(&data);
    pipeline::synth(&cfg, &data).unwrap();
    let pre = dir.path().join("pre");
    let rep = pipeline::pretrain(&cfg, &pre).unwrap();
    let table = hyperrec::formats::read_embeddings(&pre.join(pipeline::ITEM_EMBEDDINGS_FILE)).unwrap();
    assert_eq!(table.shape(), (40, 16));
    assert_eq!(table, rep.fused_item);
}
