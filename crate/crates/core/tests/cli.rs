//! The command-line interface driven stage by stage.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;

fn xdrec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdrec")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = xdrec(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stages_run_in_order_and_recommend_prints_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("tiny.toml"), tiny_config(4).to_toml()).unwrap();
    let common = ["--config", "tiny.toml"];
    let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(common.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |cmd: &str, extra: &[&str]| -> String {
        let args = with(cmd, extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>(), cwd)
    };

    run("synth-gen", &["--out", "data"]);
    assert!(cwd.join("data/items.jsonl").is_file() && cwd.join("data/interactions.jsonl").is_file());

    let early = xdrec(&with("adapters-train", &[]).iter().map(String::as_str).collect::<Vec<_>>(), cwd);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("adapters-train"));

    for stage in ["tokenizer-pretrain", "adapters-train", "router-train"] {
        run(stage, &[]);
    }
    run("sids-assign", &["--dump-embeddings"]);
    assert!(cwd.join("work/sids-assign/embeddings.jsonl").is_file());
    for stage in ["trie-build", "rec-train-universal", "rec-train-specific", "user-router-train"] {
        run(stage, &[]);
    }
    let metrics = run("evaluate", &[]);
    assert!(metrics.lines().next().unwrap().contains("R@10"), "{metrics}");

    let user = std::fs::read_to_string(cwd.join("data/interactions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(user.lines().next().unwrap()).unwrap();
    let uid = first["user_id"].as_str().unwrap();
    let tsv = run("recommend", &["--user", uid, "--domain", "A", "--k", "3", "--beam", "10"]);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "rank\titem_id\tlog_prob");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1].starts_with('A'));
        assert!(cols[2].parse::<f64>().unwrap() <= 0.0);
    }
}

#[test]
fn unknown_preset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = xdrec(&["tokenizer-pretrain", "--preset", "huge"], dir.path());
    assert!(!out.status.success());
}
