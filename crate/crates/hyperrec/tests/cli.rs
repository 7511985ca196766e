use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn hyperrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperrec"))
        .args(args)
        .env_remove("HELLM_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hyperrec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_reproducible_across_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--seed", "7", "--out", s(&b)]);
    ok(&["synth", "--seed", "8", "--out", s(&c)]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 7);
    assert_eq!(ta, tree(&b));
    assert_ne!(ta["interactions.tsv"], tree(&c)["interactions.tsv"]);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--seed", "3", "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_hyperrec"))
        .args(["synth", "--out", s(&b)])
        .env("HELLM_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(tree(&a)["interactions.tsv"], tree(&b)["interactions.tsv"]);
    let cfg = String::from_utf8(tree(&b)["config.txt"].clone()).unwrap();
    assert!(cfg.lines().any(|l| l == "seed=3"));
}

#[test]
fn stats_prints_counts_and_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.tsv");
    std::fs::write(&p, "a\tx\t1\nb\ty\t2\na\ty\t3\n").unwrap();
    let out = ok(&["stats", "--interactions", s(&p)]);
    assert_eq!(out.trim(), "users=2 items=2 interactions=3 sparsity=25.000%");
}

#[test]
fn missing_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = hyperrec(&["stats", "--interactions", s(&dir.path().join("nope.tsv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tsv"));
    let out = hyperrec(&["pretrain", "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
    let p = dir.path().join("bad.tsv");
    std::fs::write(&p, "a\tx\t1\na\tx\n").unwrap();
    let out = hyperrec(&["stats", "--interactions", s(&p)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn config_errors_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "alpha=-1\nwat=3\n").unwrap();
    let out = hyperrec(&[
        "synth",
        "--out",
        s(&dir.path().join("o")),
        "--config",
        s(&cfg),
        "--set",
        "tau=0",
        "--set",
        "synth.p_in=2",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["alpha", "wat", "tau", "p_in"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
    assert!(!dir.path().join("o").exists());
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let (ds, pre, ft) = (p("ds"), p("pre"), p("ft"));
    let quick = ["--set", "max_epochs=10", "--set", "lr=0.01", "--set", "ft.epochs=1"];
    ok(&["synth", "--seed", "2", "--out", s(&p("ds"))]);
    let listed = ok(&["build-graphs", "--data", s(&p("ds")), "--out", s(&p("g"))]);
    assert_eq!(listed.lines().count(), 5);
    let mut args = vec!["pretrain", "--data", s(&ds), "--out", s(&pre)];
    args.extend(quick);
    ok(&args);
    let mut args = vec!["finetune", "--data", s(&ds), "--pretrained", s(&pre), "--out", s(&ft)];
    args.extend(quick);
    let out = ok(&args);
    assert!(out.starts_with("trainable_fraction=0.0"));
    let preds = std::fs::read_to_string(p("ft").join("predictions.tsv")).unwrap();
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("user\trank\titem\tscore"));
    let first: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(first[1], "1");
    assert!(first[3].parse::<f64>().unwrap() > 0.0);
    let metrics = std::fs::read_to_string(p("ft").join("metrics.csv")).unwrap();
    let evaluated = ok(&["evaluate", "--run", s(&p("ft"))]);
    assert!(evaluated.starts_with("finetune "));
    assert_eq!(std::fs::read_to_string(p("ft").join("metrics.csv")).unwrap(), metrics);
    assert!(metrics.starts_with("model,dataset,R@10,N@10,R@20,N@20\nfinetune,ds,"));
}

#[test]
fn topk_sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let sw = dir.path().join("sw");
    ok(&["synth", "--seed", "7", "--out", s(&ds)]);
    ok(&["sweep", "--data", s(&ds), "--param", "topk", "--values", "1,5,10,15", "--out", s(&sw)]);
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(csv.lines().next(), Some("param,value,R@10,N@10,R@20,N@20"));
    assert_eq!(rows.len(), 4);
    let r20 = |i: usize| rows[i][4].parse::<f64>().unwrap();
    assert_eq!(rows[0][1], "1");
    assert!(r20(1) >= r20(0), "R@20 at K=5 {} < K=1 {}", r20(1), r20(0));
    let bad = hyperrec(&["sweep", "--data", s(&ds), "--param", "nope", "--values", "1", "--out", s(&sw)]);
    assert!(!bad.status.success());
}
