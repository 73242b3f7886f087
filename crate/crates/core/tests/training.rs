use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ledgerlm::corpus::{prepare_corpus, CorpusSpec, MANIFEST_FILE};
use ledgerlm::model::ModelConfig;
use ledgerlm::registry::{
    checkpoint_path, list_checkpoints, load_checkpoint, query_metrics, save_checkpoint, METRICS_FILE,
};
use ledgerlm::synth::{generate_corpus, SynthKind, SynthSource, SynthSpec};
use ledgerlm::trainer::{
    clip_gradients, global_norm, run_training, CompletionPolicy, FailureKind, TrainOptions, TrainPlan,
    CHECKPOINT_DIR,
};
use ledgerlm::Error;
use proptest::prelude::*;

const CHUNKS: u32 = 6;

fn model() -> ModelConfig {
    ModelConfig {
        hidden_size: 32,
        n_layers: 1,
        n_heads: 2,
        intermediate_size: 64,
        max_seq_len: 32,
        ..ModelConfig::toy()
    }
}

fn plan() -> TrainPlan {
    TrainPlan {
        peak_lr: 3e-3,
        final_lr: 3e-4,
        warmup_steps: 5,
        batch_size_sequences: 8,
        seed: 2,
        ..TrainPlan::default()
    }
}

/// Synthetic corpus of about 12k tokens in `CHUNKS` chunks; returns the manifest path.
fn corpus(dir: &Path) -> PathBuf {
    let spec = SynthSpec {
        seed: 4,
        sources: vec![SynthSource {
            name: "blocks".into(),
            kind: SynthKind::Blocks { run: 2 },
            tokens: 12_000,
            doc_len: [40, 300],
            copies: 1,
        }],
    };
    let sources = generate_corpus(&spec, &dir.join("src")).unwrap();
    let cs = CorpusSpec {
        max_seq_len: 32,
        heldout_sequences: 8,
        sources,
        stages: vec![],
    };
    prepare_corpus(&cs, dir, 1, CHUNKS, &dir.join("data")).unwrap();
    dir.join("data").join(MANIFEST_FILE)
}

fn ckpt_bytes(run: &Path, i: u32) -> Vec<u8> {
    fs::read(checkpoint_path(&run.join(CHECKPOINT_DIR), i)).unwrap()
}

#[test]
fn resumed_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let full = tmp.path().join("full");
    let summary = run_training(&TrainOptions::new(&manifest, &full, model(), plan())).unwrap();
    assert_eq!(summary.trained, (0..CHUNKS).collect::<Vec<_>>());
    assert_eq!(list_checkpoints(&full.join(CHECKPOINT_DIR)).unwrap().len(), CHUNKS as usize + 1);

    for split in [2u32, 4] {
        let run = tmp.path().join(format!("split{split}"));
        let mut first = TrainOptions::new(&manifest, &run, model(), plan());
        first.stop_after = Some(split);
        run_training(&first).unwrap();
        let mut second = TrainOptions::new(&manifest, &run, model(), plan());
        second.resume = Some(checkpoint_path(&run.join(CHECKPOINT_DIR), split));
        let s = run_training(&second).unwrap();
        assert_eq!(s.step, summary.step);
        for i in 0..=CHUNKS {
            assert_eq!(ckpt_bytes(&run, i), ckpt_bytes(&full, i), "split {split}, checkpoint {i}");
        }
        let strip = |p: &Path| {
            query_metrics(&p.join(METRICS_FILE), ..)
                .unwrap()
                .into_iter()
                .map(|r| (r.step, r.chunk, r.loss.to_bits(), r.grad_norm_preclip.to_bits(), r.lr.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&run), strip(&full));
    }
}

#[test]
fn loss_falls_and_lr_follows_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let run = tmp.path().join("run");
    run_training(&TrainOptions::new(&manifest, &run, model(), plan())).unwrap();
    let rows = query_metrics(&run.join(METRICS_FILE), ..).unwrap();
    assert!(rows.len() >= 40, "{} steps", rows.len());
    let head: f64 = rows[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let tail: f64 = rows[rows.len() - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    assert!(tail < head - 0.3, "loss {head} -> {tail}");
    assert_eq!(rows[4].step, 5);
    assert!((rows[4].lr - 3e-3).abs() < 1e-15);
    assert!((rows.last().unwrap().lr - 3e-4).abs() < 1e-12);
    assert!(rows.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn nan_chunks_are_skipped_and_substituted() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let run = tmp.path().join("run");
    let mut opts = TrainOptions::new(&manifest, &run, model(), plan());
    opts.inject_nan_chunks = BTreeSet::from([1, 4]);
    let s = run_training(&opts).unwrap();
    assert_eq!(s.ledger.failed_chunks(), BTreeSet::from([1, 4]));
    assert!(s.ledger.entries.iter().all(|e| e.kind == FailureKind::NanLoss));
    assert_eq!(s.trained, vec![0, 2, 3, 5, 0, 2]);
    let subs: Vec<u32> = s.ledger.substitutions.iter().map(|x| x.chunk).collect();
    assert_eq!(subs, vec![0, 2]);

    let ledger: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("nan_ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["entries"].as_array().unwrap().len(), 2);

    let rows = query_metrics(&run.join(METRICS_FILE), ..).unwrap();
    assert!(rows.iter().all(|r| r.loss.is_finite() && r.chunk != 1 && r.chunk != 4));
    assert!(rows.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn completion_policy_none_leaves_schedule_short() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let mut p = plan();
    p.completion_policy = CompletionPolicy::None;
    let mut opts = TrainOptions::new(&manifest, &tmp.path().join("run"), model(), p);
    opts.inject_nan_chunks = BTreeSet::from([3]);
    let s = run_training(&opts).unwrap();
    assert_eq!(s.trained, vec![0, 1, 2, 4, 5]);
    assert!(s.ledger.substitutions.is_empty());
}

#[test]
fn resume_needs_optimizer_state_and_matching_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let run = tmp.path().join("run");
    let mut opts = TrainOptions::new(&manifest, &run, model(), plan());
    opts.stop_after = Some(1);
    run_training(&opts).unwrap();

    let path = checkpoint_path(&run.join(CHECKPOINT_DIR), 1);
    let mut c = load_checkpoint(&path).unwrap();
    c.optimizer = None;
    let stripped = tmp.path().join("stripped");
    let stripped_path = save_checkpoint(&c, &stripped).unwrap();
    let mut again = TrainOptions::new(&manifest, &run, model(), plan());
    again.resume = Some(stripped_path);
    assert!(matches!(run_training(&again), Err(Error::MissingOptimizerState { .. })));

    let mut c = load_checkpoint(&path).unwrap();
    c.manifest_checksum = "00".repeat(32);
    let other = save_checkpoint(&c, &tmp.path().join("other")).unwrap();
    again.resume = Some(other);
    assert!(matches!(run_training(&again), Err(Error::ManifestMismatch { .. })));
}

#[test]
fn warmup_beyond_budget_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = corpus(tmp.path());
    let mut p = plan();
    p.warmup_steps = 10_000;
    let opts = TrainOptions::new(&manifest, &tmp.path().join("run"), model(), p);
    assert!(matches!(run_training(&opts), Err(Error::Invalid(_))));
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_limit(
        grads in proptest::collection::vec(-50.0f64..50.0, 1..200),
        clip in 0.01f64..10.0,
    ) {
        let mut g = grads.clone();
        let pre = clip_gradients(&mut g, clip).unwrap();
        prop_assert!((pre - global_norm(&grads)).abs() <= 1e-12 * pre.max(1.0));
        let post = global_norm(&g);
        prop_assert!(post <= clip + 1e-9);
        prop_assert!((post - pre.min(clip)).abs() <= 1e-9);
    }
}
