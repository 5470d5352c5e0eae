use std::fs;
use std::path::Path;

use clap::Parser;
use pvit_cli::{execute, run, Cli};

const TINY: &[&str] = &[
    "synth.classes=3",
    "synth.per_class=20",
    "synth.height=8",
    "synth.width=8",
    "data.test_per_class=5",
    "ood.n=10",
    "model.patch_size=4",
    "model.embed_dim=8",
    "model.depth=1",
    "model.heads=2",
    "model.mlp_dim=8",
    "train.epochs=2",
    "train.batch_size=8",
    "prior.epochs=2",
    "prior.hidden=8",
    "prior.batch_size=8",
    "attention.limit=2",
];

fn args(out: &Path, cmd: &str, extra: &[&str]) -> Vec<String> {
    let mut a = vec!["pvit".to_string(), cmd.to_string(), "--out".into(), out.display().to_string()];
    for kv in TINY.iter().chain(extra) {
        a.push("--set".into());
        a.push(kv.to_string());
    }
    a
}

fn error_of(argv: Vec<String>) -> String {
    let cli = Cli::try_parse_from(argv).unwrap();
    execute(&cli).unwrap_err().to_string()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(run(["pvit", "--help"]), 0);
    assert_eq!(run(["pvit", "no-such-command"]), 1);
    assert_eq!(run(["pvit", "score", "--set", "nonsense"]), 1);
    assert_eq!(run(["pvit", "score", "--set", "model.colour=blue"]), 1);
}

#[test]
fn bad_data_files_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.idx");
    fs::write(&junk, b"not an idx file").unwrap();
    let junk = format!("{}", junk.display());
    let keys = ["data.train_images", "data.train_labels", "data.test_images", "data.test_labels"];
    let mut set: Vec<String> = keys.iter().map(|k| format!("{k}={junk}")).collect();
    set.push("data.source=idx".into());
    let set: Vec<&str> = set.iter().map(String::as_str).collect();
    assert_eq!(run(args(tmp.path(), "train-prior", &set)), 2);
    let missing = set.iter().map(|s| s.replace("junk.idx", "absent.idx")).collect::<Vec<_>>();
    let missing: Vec<&str> = missing.iter().map(String::as_str).collect();
    assert_eq!(run(args(tmp.path(), "train-prior", &missing)), 2);
}

#[test]
fn missing_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let msg = error_of(args(tmp.path(), "train-prior", &["data.source=idx"]));
    assert!(msg.contains("data.train_images"), "{msg}");
    let msg = error_of(args(tmp.path(), "score", &["score.predictor=table"]));
    assert!(msg.contains("score.predicted_logits_dir"), "{msg}");
}

#[test]
fn bad_values_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let msg = error_of(args(tmp.path(), "train-prior", &["prior.epochs=many"]));
    assert!(msg.contains("prior.epochs"), "{msg}");
    let msg = error_of(args(tmp.path(), "eval", &["eval.fields=pge,bogus"]));
    assert!(msg.contains("bogus"), "{msg}");
}

#[test]
fn score_without_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(args(tmp.path(), "train-prior", &[])), 0);
    assert_eq!(run(args(tmp.path(), "score", &[])), 2);
}

fn pipeline(out: &Path) {
    for cmd in ["train-prior", "train-pvit", "score", "eval", "attention-dump", "export-logits"] {
        assert_eq!(run(args(out, cmd, &[])), 0, "{cmd}");
    }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                // The rendered config records the output directory.
                if !rel.ends_with(".config") {
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_reruns_byte_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.iter().any(|(n, _)| n.ends_with("summary.csv")));
    assert_eq!(ta.len(), tb.len());
    for ((na, da), (nb, db)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}

#[test]
fn resume_extends_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    assert_eq!(run(args(out, "train-prior", &[])), 0);
    assert_eq!(run(args(out, "train-pvit", &["train.epochs=2"])), 0);
    let rows = |p: &Path| fs::read_to_string(p).unwrap().lines().count() - 1;
    let csv = out.join("pvit/loss.csv");
    let first = rows(&csv);
    assert_eq!(run(args(out, "train-pvit", &["train.epochs=3", "train.resume=true"])), 0);
    assert_eq!(rows(&csv), first * 3 / 2);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("pvit/report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs_done"], 3);
}
