//! End-to-end behaviour of the binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "out_dir": "run",
  "corpus": {"train_scenes": 16, "val_scenes": 4, "test_scenes": 16},
  "model": {"d_model": 16, "n_layer": 1, "n_head": 2, "d_emb": 16,
            "nlu_d_model": 16, "nlu_n_layer": 1, "nlu_n_head": 2, "patch": 8},
  "stage1": {"epochs": 2, "batch_size": 8},
  "stage2": {"epochs": 1, "batch_size": 8},
  "stage3": {"epochs": 1, "batch_size": 8},
  "ablation": {"seeds": [0]}
}"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unisearch")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = bin(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn workdir(config: &str) -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("cfg.json"), config).unwrap();
    d
}

fn pipeline(dir: &Path) {
    ok(dir, &["gen-data", "--config", "cfg.json"]);
    for s in ["1", "2", "3"] {
        ok(dir, &["train", "--stage", s, "--config", "cfg.json"]);
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_one() {
    let d = workdir(TINY);
    assert_eq!(bin(d.path(), &[]).status.code(), Some(1));
    assert_eq!(bin(d.path(), &["train", "--stage", "4", "--config", "cfg.json"]).status.code(), Some(1));
    assert_eq!(bin(d.path(), &["eval", "--ckpt", "x"]).status.code(), Some(1));
    assert_eq!(bin(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_prerequisite_names_the_required_stage() {
    let d = workdir(TINY);
    ok(d.path(), &["gen-data", "--config", "cfg.json"]);
    let o = bin(d.path(), &["train", "--stage", "2", "--config", "cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage 1 checkpoint required"));
    let o = bin(d.path(), &["train", "--stage", "3", "--config", "cfg.json"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage 2 checkpoint required"));
}

#[test]
fn gen_data_is_reproducible_and_counts_records() {
    let d = workdir(TINY);
    let out = ok(d.path(), &["gen-data", "--config", "cfg.json", "--out", "a"]);
    assert!(out.starts_with("108 records"), "{out}");
    ok(d.path(), &["gen-data", "--config", "cfg.json", "--out", "b"]);
    assert_eq!(files(&d.path().join("a")), files(&d.path().join("b")));
}

#[test]
fn bad_output_path_leaves_no_manifest() {
    let d = workdir(TINY);
    fs::write(d.path().join("blocker"), "file").unwrap();
    let o = bin(d.path(), &["gen-data", "--config", "cfg.json", "--out", "blocker/data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("blocker/data/manifest.json").exists());
}

#[test]
fn training_writes_config_trace_and_checkpoint_deterministically() {
    let (a, b) = (workdir(TINY), workdir(TINY));
    pipeline(a.path());
    pipeline(b.path());
    for s in ["stage1", "stage2", "stage3"] {
        let (ra, rb) = (a.path().join("run").join(s), b.path().join("run").join(s));
        assert_eq!(files(&ra), files(&rb), "{s} differs between identical runs");
        assert!(ra.join("config.json").is_file() && ra.join("stage.json").is_file());
        assert!(!ra.join(".lock").exists());
    }
    // 16 scenes x 3 languages in batches of 8: 6 steps per epoch.
    let csv = fs::read_to_string(a.path().join("run/stage1/loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,loss_total,loss_ti,loss_tc,loss_ce,loss_mse,lr");
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
}

#[test]
fn seed_flag_changes_the_run() {
    let d = workdir(TINY);
    ok(d.path(), &["gen-data", "--config", "cfg.json"]);
    ok(d.path(), &["train", "--stage", "1", "--config", "cfg.json", "--out", "s0"]);
    ok(d.path(), &["train", "--stage", "1", "--config", "cfg.json", "--seed", "5", "--out", "s5"]);
    let read = |p: &str| fs::read(d.path().join(p).join("loss.csv")).unwrap();
    assert_ne!(read("s0"), read("s5"));
    let resolved = fs::read_to_string(d.path().join("s5/config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 5"));
}

#[test]
fn training_does_not_modify_its_input_checkpoint() {
    let d = workdir(TINY);
    pipeline(d.path());
    let before = files(&d.path().join("run/stage2/checkpoint"));
    ok(d.path(), &["train", "--stage", "3", "--config", "cfg.json", "--out", "again"]);
    assert_eq!(files(&d.path().join("run/stage2/checkpoint")), before);
    let o = bin(
        d.path(),
        &["train", "--stage", "3", "--config", "cfg.json", "--init", "again/checkpoint", "--out", "again"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_rejects_a_corpus_with_another_vocabulary() {
    let d = workdir(TINY);
    pipeline(d.path());
    let other = TINY.replace("\"test_scenes\": 16}", "\"test_scenes\": 16, \"lexicon_seed\": 99}");
    fs::write(d.path().join("other.json"), other).unwrap();
    ok(d.path(), &["gen-data", "--config", "other.json", "--out", "other"]);
    let o = bin(d.path(), &["eval", "--ckpt", "run/stage1/checkpoint", "--data", "other", "--k", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocabulary mismatch"));
}

#[test]
fn locked_run_directory_is_refused() {
    let d = workdir(TINY);
    ok(d.path(), &["gen-data", "--config", "cfg.json"]);
    fs::create_dir_all(d.path().join("run/stage1")).unwrap();
    fs::write(d.path().join("run/stage1/.lock"), "").unwrap();
    let o = bin(d.path(), &["train", "--stage", "1", "--config", "cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn ablation_rows_match_single_checkpoint_evaluation() {
    let d = workdir(TINY);
    ok(d.path(), &["ablate", "--config", "cfg.json"]);
    let root = d.path().join("run/ablation");
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(root.join("seed0/report.json")).unwrap()).unwrap();
    // Five variants x 3 languages + Mean; retrieval tasks for all, NLU for
    // the two variants with a trained NLU module.
    let per_lang = 5 * 3 + 2 * 2;
    assert_eq!(rows.len(), per_lang * 4);

    ok(
        d.path(),
        &["eval", "--ckpt", "run/ablation/seed0/stage1/checkpoint", "--data", "run/data", "--k", "5", "--out", "ev"],
    );
    let single: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(d.path().join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(single.len(), 3 * 4);
    for r in &single {
        let twin = rows
            .iter()
            .find(|x| x["variant"] == "stage1" && x["language"] == r["language"] && x["task"] == r["task"])
            .unwrap();
        assert_eq!(twin["value"], r["value"]);
    }

    // Cross-check against a recomputation from the saved embedding tables.
    let tables = unisearch_core::eval::VariantTables::load(&d.path().join("ev/tables/stage1")).unwrap();
    let ds = unisearch_core::Dataset::load(&d.path().join("run/data")).unwrap();
    let (bundle, _) = unisearch_core::load_checkpoint(&root.join("seed0/stage1/checkpoint")).unwrap();
    let split = unisearch_core::train::prepare_split(&ds, unisearch_core::Split::Test, &bundle.config).unwrap();
    let again = unisearch_core::eval::report_from_tables(&split, &[tables], 5).unwrap();
    let live: serde_json::Value = serde_json::from_str(&again.to_json().unwrap()).unwrap();
    assert_eq!(live.as_array().unwrap(), &single);
}
