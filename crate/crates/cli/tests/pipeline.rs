use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11

[synthetic]
num_items = 60
num_clusters = 3
num_users = 90
min_interactions = 5
max_interactions = 8

[train]
batch_size = 128
hidden = 16
embed_dim = 8
max_epochs = 3
patience = 2
na_batch = 32
knn_k = 5
prune_k = 3
"#;

fn tmlp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmlp"))
        .arg("--config")
        .arg(dir.join("cfg.toml"))
        .arg("--out")
        .arg(dir.join("work"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tmlp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), SMALL).unwrap();
    dir
}

#[test]
fn full_pipeline_produces_artifacts() {
    let dir = setup();
    let d = dir.path();
    let work = d.join("work");
    ok(d, &["synth"]);
    ok(d, &["prepare"]);
    let stats = fs::read_to_string(work.join("stats.csv")).unwrap();
    assert!(stats.starts_with("users,items,interactions,sparsity\n90,60,"), "{stats}");
    assert!(stats.trim_end().ends_with('%'));

    ok(d, &["build-graph"]);
    ok(d, &["prune"]);
    let report = fs::read_to_string(work.join("prune_report.csv")).unwrap();
    assert!(report.starts_with("node,kept,dropped,min_ts,max_ts\n"));

    ok(d, &["corrupt", "--epsilon", "0.2"]);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(work.join("corrupt.json")).unwrap()).unwrap();
    assert_eq!(c["epsilon"], 0.2);

    let metrics = ok(d, &["train"]);
    assert!(metrics.starts_with("split,metric,N,value\ntest,recall,10,"));
    let run = work.join("runs/full");
    for f in ["manifest.json", "epochs.csv", "best.tmc", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let epochs = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert!(epochs.starts_with("epoch,loss_bpr,loss_na,val_r20,val_n20\n0,"));

    // Evaluating the restored checkpoint reproduces the training report.
    let eval = ok(d, &["evaluate", "--split", "test"]);
    assert_eq!(eval, metrics);

    let table = ok(d, &["ablate", "--variants", "full,no_na"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "variant,label,R@10,R@20,N@10,N@20,best_epoch");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("no_na,w/o NA Loss,"));
}

#[test]
fn commands_are_idempotent() {
    let dir = setup();
    let d = dir.path();
    let work = d.join("work");
    ok(d, &["synth"]);
    ok(d, &["prepare"]);
    ok(d, &["build-graph"]);
    let snapshot = |names: &[&str]| names.iter().map(|n| fs::read(work.join(n)).unwrap()).collect::<Vec<_>>();
    let files = ["split.tsv", "stats.json", "visual.tmf", "graph_fused.tmg"];
    let before = snapshot(&files);
    ok(d, &["prepare"]);
    ok(d, &["build-graph"]);
    assert_eq!(before, snapshot(&files));
}

#[test]
fn missing_upstream_names_the_command() {
    let dir = setup();
    let d = dir.path();
    let out = tmlp(d, &["build-graph"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `tmlp prepare` first"));
    ok(d, &["synth"]);
    ok(d, &["prepare"]);
    let out = tmlp(d, &["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `tmlp prune` first"));
    let out = tmlp(d, &["evaluate"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `tmlp train` first"));
}

#[test]
fn bad_config_and_arguments_fail() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = tmlp(d, &["synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(d.join("cfg.toml"), SMALL).unwrap();
    ok(d, &["synth"]);
    ok(d, &["prepare"]);
    let out = tmlp(d, &["train", "--variant", "nonsense"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));

    fs::write(d.join("work/interactions.tsv"), "# nothing\n").unwrap();
    let out = tmlp(d, &["prepare"]);
    assert!(!out.status.success());
}

#[test]
fn logs_are_key_value_lines() {
    let dir = setup();
    let d = dir.path();
    let out = tmlp(d, &["synth"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("level=info event=synthesized users=90 items=60")), "{err}");
}
