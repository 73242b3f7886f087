use std::fs;
use std::path::Path;

use ledgerlm::config::{load_config, validate_config};
use ledgerlm::pipeline::{provenance_path, reproduce_desk, Stage};
use ledgerlm::Error;

fn sample(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    fs::read_to_string(path).unwrap()
}

fn issue_keys(text: &str, base: &Path) -> Vec<Vec<String>> {
    match validate_config(text, base) {
        Err(Error::Config(issues)) => issues.into_iter().map(|i| i.keys).collect(),
        other => panic!("expected config issues, got {other:?}"),
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy.toml", "smoke.toml"] {
        let cfg = load_config(&dir.join(name)).unwrap();
        assert_eq!(cfg.schema_version, 1);
        assert!(!cfg.corpus_spec().sources.is_empty());
    }
}

#[test]
fn warmup_past_total_names_both_keys() {
    let text = sample("smoke.toml").replace("warmup_steps = 4", "warmup_steps = 4\ntotal_steps = 4");
    let keys = issue_keys(&text, Path::new("."));
    assert!(keys.contains(&vec!["train.warmup_steps".to_string(), "train.total_steps".to_string()]));
}

#[test]
fn stage_budget_over_source_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("web.txt"), "abcdefghij\nklmnopqrst\n").unwrap();
    let extra = r#"heldout_sequences = 4

[[corpus.sources]]
name = "web"
path = "web.txt"
weight_tokens = 20

[[corpus.stages]]
web = 25
blocks = 6000
"#;
    let text = sample("smoke.toml").replace("heldout_sequences = 4\n", extra);
    let keys = issue_keys(&text, tmp.path());
    assert!(
        keys.iter()
            .any(|k| k.contains(&"corpus.stages[0].web".to_string()) && k.contains(&"corpus.sources.web".to_string())),
        "{keys:?}"
    );
}

#[test]
fn every_violation_is_reported_at_once() {
    let text = sample("smoke.toml")
        .replace("vocab_size = 258", "vocab_size = 300")
        .replace("final_lr = 3e-4", "final_lr = 3e-2")
        .replace("k = 8", "k = 30");
    let keys: Vec<String> = issue_keys(&text, Path::new(".")).into_iter().flatten().collect();
    for key in ["model.vocab_size", "train.final_lr", "analysis.k"] {
        assert!(keys.iter().any(|k| k == key), "{key} missing from {keys:?}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let text = sample("smoke.toml").replace("[train]", "[train]\nlearning_rate = 1.0");
    assert!(matches!(validate_config(&text, Path::new(".")), Err(Error::Config(_))));
}

#[test]
fn reproduce_twice_gives_identical_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let text = sample("smoke.toml").replace("../out/smoke", "out");
    let cfg = validate_config(&text, tmp.path()).unwrap();
    let first = reproduce_desk(&cfg, tmp.path(), false).unwrap();
    let path = provenance_path(&cfg, tmp.path());
    let bytes = fs::read(&path).unwrap();
    let second = reproduce_desk(&cfg, tmp.path(), false).unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::read(&path).unwrap(), bytes);
    assert_eq!(first.checkpoints.len(), 5);
    assert_eq!(first.evaluations.len(), 5);
    assert!(tmp.path().join("out/analysis/fig8_correlations.csv").exists());
    assert!(tmp.path().join("out/eval/perplexity.csv").exists());

    let resumed = reproduce_desk(&cfg, tmp.path(), true).unwrap();
    assert_eq!(resumed.checkpoints, first.checkpoints);

    let text = text.replace("seed = 1\noutput_root", "seed = 2\noutput_root");
    let other = validate_config(&text, tmp.path()).unwrap();
    let third = reproduce_desk(&other, tmp.path(), false).unwrap();
    assert_ne!(third.manifest_checksum, first.manifest_checksum);
}

#[test]
fn failures_carry_their_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let text = sample("smoke.toml")
        .replace("../out/smoke", "out")
        .replace("heldout_sequences = 4", "heldout_sequences = 0");
    let cfg = validate_config(&text, tmp.path()).unwrap();
    let err = reproduce_desk(&cfg, tmp.path(), false).unwrap_err();
    assert_eq!(err.stage, Stage::Eval);
    assert_eq!(err.stage.exit_code(), 5);
}
