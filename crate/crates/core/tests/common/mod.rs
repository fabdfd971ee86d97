//! Helpers shared by the CLI and acceptance suites.
#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub fn pmvl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmvl"))
        .current_dir(dir)
        .env("PMVL_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) {
    let out = pmvl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

pub fn small_bundle(dir: &Path) {
    ok(dir, &["synth", "--n", "60", "--classes", "3", "--source-dim", "4", "--view-dims", "6,5,4", "--seed", "3", "--out", "syn"]);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

/// Every command, run twice into fresh directories, writes identical bytes.
pub fn all_commands_deterministic() -> bool {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            let d = tmp.path();
            small_bundle(d);
            let common = ["--epochs", "6", "--latent-dim", "4", "--seed", "5"];
            let with = |args: &[&'static str]| [args, &common[..]].concat();
            ok(d, &["mask", "--data", "syn", "--eta", "0.3", "--seed", "2", "--out", "m"]);
            ok(d, &with(&["train-sup", "--data", "syn", "--eta", "0.3", "--repeats", "2", "--out", "sup"]));
            ok(d, &["eval", "--model", "sup/model1", "--data", "m", "--out", "eval.json"]);
            ok(d, &with(&["train-unsup", "--data", "syn", "--eta", "0.3", "--out", "uns"]));
            ok(d, &with(&["train-unsup", "--data", "m", "--truth", "syn", "--no-gan", "--out", "uns2"]));
            for method in ["cpm-gan", "cpm", "global-mean", "class-mean", "soft-impute"] {
                ok(d, &with(&["impute", "--data", "syn", "--eta", "0.3", "--method", method, "--out", leak(format!("imp-{method}"))]));
            }
            ok(d, &with(&["sweep", "--data", "syn", "--task", "impute", "--rates", "0.3", "--repeats", "2", "--out", "swi.csv"]));
            ok(d, &with(&["sweep", "--data", "syn", "--task", "classify", "--rates", "0,0.3", "--repeats", "2", "--out", "swc.csv"]));
            snapshot(d)
        })
        .collect();
    runs[0] == runs[1]
}


fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}
