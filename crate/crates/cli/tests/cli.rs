use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const TINY_PLAN: &str = r#"
name = "tiny"
kind = "ablation"
seeds = [3]
train_batches = 2
test_samples = 4
hidden = [8, 8]

[train]
epochs = 1
batch_size = 10
"#;

fn madapt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_madapt"))
        .args(args)
        .current_dir(dir)
        .env_remove("MADAPT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = madapt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `dir` except manifests and wall-clock timing.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let name = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if name.ends_with("manifest.jsonl") || name.ends_with("timing.csv") {
                continue;
            }
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn manifest_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let obj = v.as_object_mut().unwrap();
            assert!(obj.remove("started_unix").unwrap().as_f64().unwrap() > 0.0);
            assert!(obj.remove("finished_unix").is_some());
            v
        })
        .collect()
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data", "--b", "2", "--m", "10", "--seed", "7", "--out", "train.mads"],
    &["gen-data", "--b", "1", "--m", "5", "--seed", "8", "--domain", "in-the-wild-like", "--out", "test.mads"],
    &["pretrain", "--data", "train.mads", "--epochs", "2", "--hidden", "8,8", "--batch-size", "10", "--seed", "1", "--out", "pre"],
    &["meta-train", "--data", "train.mads", "--epochs", "2", "--hidden", "8,8", "--batch-size", "10", "--seed", "1", "--out", "meta"],
    &["meta-train", "--data", "train.mads", "--epochs", "1", "--hidden", "8,8", "--batch-size", "10", "--seed", "1", "--no-aux", "--out", "meta-only"],
    &["adapt", "--data", "test.mads", "--model", "meta", "--out", "adapted"],
    &["adapt", "--data", "test.mads", "--model", "pre", "--mode", "eft", "--steps", "3", "--out", "adapted-eft"],
    &["eval", "--data", "test.mads", "--model", "meta", "--out", "evaluated"],
    &["experiment", "--plan", "tiny.plan", "--out", "exp"],
    &["grad-check", "--seed", "2", "--instances", "2", "--out", "gc"],
];

fn run_pipeline(dir: &Path, jobs: &str) -> Vec<BTreeMap<String, Vec<u8>>> {
    std::fs::write(dir.join("tiny.plan"), TINY_PLAN).unwrap();
    PIPELINE
        .iter()
        .map(|args| {
            let mut full = vec!["--jobs", jobs];
            full.extend_from_slice(args);
            ok(dir, &full);
            snapshot(dir)
        })
        .collect()
}

fn differing(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut names: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| a.get(n) != b.get(n)).collect()
}

#[test]
fn every_subcommand_is_byte_identical_across_runs_and_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let first = run_pipeline(a.path(), "1");
    let fresh = run_pipeline(b.path(), "1");
    let parallel = run_pipeline(c.path(), "4");
    for (i, args) in PIPELINE.iter().enumerate() {
        let diff = differing(&first[i], &fresh[i]);
        assert!(diff.is_empty(), "rerun differs after {args:?}: {diff:?}");
        let diff = differing(&first[i], &parallel[i]);
        assert!(diff.is_empty(), "--jobs 4 differs after {args:?}: {diff:?}");
    }
    let again = run_pipeline(a.path(), "1");
    let last = PIPELINE.len() - 1;
    let diff = differing(&first[last], &again[last]);
    assert!(diff.is_empty(), "consecutive run in place differs: {diff:?}");

    let files = &first[PIPELINE.len() - 1];
    for expected in [
        "train.mads",
        "pre/main.ckpt",
        "meta/aux.ckpt",
        "adapted/predictions.csv",
        "adapted/traces.csv",
        "evaluated/results.csv",
        "exp/summary.csv",
        "gc/grad_check.csv",
    ] {
        assert!(files.contains_key(expected), "{expected} missing");
    }
    assert!(!files.contains_key("meta-only/aux.ckpt"));

    for manifest in [
        "train.mads.manifest.jsonl",
        "pre/manifest.jsonl",
        "meta/manifest.jsonl",
        "adapted/manifest.jsonl",
        "evaluated/manifest.jsonl",
        "exp/manifest.jsonl",
        "gc/manifest.jsonl",
    ] {
        let lines = manifest_lines(&a.path().join(manifest));
        assert_eq!(lines.len(), 2, "{manifest}");
        assert_eq!(lines[0], lines[1], "{manifest}");
        assert_eq!(lines[0]["exit_code"], 0);
        assert_eq!(lines[0]["input_hash"].as_str().unwrap().len(), 64);
        for artifact in lines[0]["artifacts"].as_array().unwrap() {
            assert_eq!(artifact["sha256"].as_str().unwrap().len(), 64);
        }
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--b", "1", "--m", "4", "--seed", "21", "--out", "flag.mads"]);
    let env = Command::new(env!("CARGO_BIN_EXE_madapt"))
        .args(["gen-data", "--b", "1", "--m", "4", "--out", "env.mads"])
        .current_dir(d)
        .env("MADAPT_SEED", "21")
        .output()
        .unwrap();
    assert!(env.status.success());
    let flag_wins = Command::new(env!("CARGO_BIN_EXE_madapt"))
        .args(["gen-data", "--b", "1", "--m", "4", "--seed", "21", "--out", "both.mads"])
        .current_dir(d)
        .env("MADAPT_SEED", "99")
        .output()
        .unwrap();
    assert!(flag_wins.status.success());
    ok(d, &["gen-data", "--b", "1", "--m", "4", "--out", "none.mads"]);
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read("flag.mads"), read("env.mads"));
    assert_eq!(read("flag.mads"), read("both.mads"));
    assert_ne!(read("flag.mads"), read("none.mads"));

    std::fs::write(d.join("seeded.toml"), "seed = 21\n").unwrap();
    ok(d, &["gen-data", "--config", "seeded.toml", "--b", "1", "--m", "4", "--out", "file.mads"]);
    assert_eq!(read("flag.mads"), read("file.mads"));
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().find(|l| l.starts_with('{')).expect("structured error on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nalpah = 0.1\n").unwrap();
    let out = madapt(d, &["gen-data", "--config", "bad.toml", "--out", "x.mads"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("alpah"));

    let out = madapt(d, &["experiment", "--preset", "nope", "--out", "e"]);
    assert_eq!(out.status.code(), Some(2));
    let out = madapt(d, &["--jobs", "0", "grad-check", "--instances", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = madapt(dir.path(), &["pretrain", "--data", "absent.mads", "--out", "m"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["exit_code"], 4);
    let lines = manifest_lines(&dir.path().join("m/manifest.jsonl"));
    assert_eq!(lines[0]["exit_code"], 4);
    assert!(lines[0]["error"].as_str().unwrap().contains("absent.mads"));
}

#[test]
fn training_divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--b", "2", "--m", "10", "--seed", "1", "--out", "t.mads"]);
    let out = madapt(
        d,
        &["pretrain", "--data", "t.mads", "--hidden", "8,8", "--batch-size", "10", "--beta-lr", "1e300", "--epochs", "2", "--out", "m"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"], "divergence");
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = madapt(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_config_prints_schema_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--help-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["[train]", "[adapt]", "early_stop_rel_tol", "lr_grid", "MADAPT_SEED"] {
        assert!(text.contains(key), "{key}");
    }
}
