use std::path::Path;
use std::process::{Command, Output};

fn offclip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_offclip"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_deterministic_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = offclip(tmp.path(), &["gen-data", "--seed", "3", "--out-dir", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut files: Vec<_> = std::fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "gen-data.manifest.json")
        .collect();
    files.sort();
    assert!(!files.is_empty());
    for f in &files {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f:?}");
    }
    let corpus = std::fs::read_to_string(tmp.path().join("a/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 512);
}

#[test]
fn different_seeds_give_different_data() {
    let tmp = tempfile::tempdir().unwrap();
    offclip(tmp.path(), &["gen-data", "--seed", "3", "--out-dir", "a"]);
    offclip(tmp.path(), &["gen-data", "--seed", "4", "--out-dir", "b"]);
    let a = std::fs::read(tmp.path().join("a/corpus.jsonl")).unwrap();
    let b = std::fs::read(tmp.path().join("b/corpus.jsonl")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = offclip(tmp.path(), &["train", "--config", "nope.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = offclip(tmp.path(), &["gen-data", "--set", "synthetic.normal_fraction=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("normal_fraction"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("c.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = offclip(tmp.path(), &["train", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn loss_check_passes_by_default_and_fails_when_impossible() {
    let tmp = tempfile::tempdir().unwrap();
    let o = offclip(tmp.path(), &["loss-check", "--out-dir", "l"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("l/loss_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 4 * 5);

    let o = offclip(tmp.path(), &["loss-check", "--tolerance", "1e-300", "--out-dir", "m"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(tmp.path().join("m/loss-check.manifest.json").exists());
}

#[test]
fn eval_rejects_scores_without_truth() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("s.csv"), "id,normal_score,abnormal_score\n0,0.1,0.9\n").unwrap();
    let o = offclip(tmp.path(), &["eval", "--scores", "s.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("truth"));
}

#[test]
fn filter_reports_never_overwrites_its_input() {
    let tmp = tempfile::tempdir().unwrap();
    let line = r#"{"id":"r1","sentences":[{"text":"no effusion"},{"text":"cardiomegaly present"}]}"#;
    std::fs::write(tmp.path().join("c.jsonl"), format!("{line}\n")).unwrap();
    let o = offclip(tmp.path(), &["filter-reports", "--in", "c.jsonl", "--out", "c.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(tmp.path().join("c.jsonl")).unwrap(), format!("{line}\n"));
}

#[test]
fn replay_detects_tampered_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = offclip(tmp.path(), &["loss-check", "--per-size", "1", "--out-dir", "l"]);
    assert!(o.status.success());
    let manifest = tmp.path().join("l/loss-check.manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["outputs"][0]["sha256"] = "0".repeat(64).into();
    std::fs::write(&manifest, serde_json::to_string(&v).unwrap()).unwrap();
    let o = offclip(tmp.path(), &["replay", "l/loss-check.manifest.json", "--out-dir", "r"]);
    assert_eq!(o.status.code(), Some(1));
}
