use std::fs;

use ledgerlm::model::{init_parameters, ModelConfig};
use ledgerlm::registry::{
    checkpoint_path, encode_checkpoint, export_metrics_csv, list_checkpoints, load_checkpoint, load_weights,
    query_metrics, save_checkpoint, truncate_metrics, Checkpoint, MetricsLedger, MetricsRecord, PrecisionTag,
};
use ledgerlm::rng::Rng;
use ledgerlm::trainer::{CompletionPolicy, OptimizerState, TrainProgress};
use ledgerlm::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden_size: 16,
        n_layers: 1,
        n_heads: 2,
        intermediate_size: 24,
        ..ModelConfig::toy()
    }
}

fn sample(index: u32, precision: PrecisionTag) -> Checkpoint {
    let cfg = tiny();
    let params = init_parameters(&cfg, 9).unwrap();
    let mut rng = Rng::seed_from_u64(4);
    let n = params.len();
    let optimizer = OptimizerState {
        m: (0..n).map(|_| rng.normal() * 1e-3).collect(),
        v: (0..n).map(|_| rng.next_f64() * 1e-6).collect(),
        t: 123,
    };
    Checkpoint {
        index,
        step: 123,
        model: cfg,
        params,
        optimizer: Some(optimizer),
        rng_state: rng.to_bytes().to_vec(),
        precision_tag: precision,
        manifest_checksum: "ab".repeat(32),
        schema_version: 1,
        progress: TrainProgress::new(20, 980, CompletionPolicy::FirstChunks),
    }
}

#[test]
fn full_precision_round_trip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let c = sample(3, PrecisionTag::Full);
    let path = save_checkpoint(&c, tmp.path()).unwrap();
    assert_eq!(path, checkpoint_path(tmp.path(), 3));
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, c);
    assert!(back.params.bit_identical(&c.params));
    assert!(back.precision_warning().is_none());
    assert_eq!(encode_checkpoint(&back).unwrap(), fs::read(&path).unwrap());
}

#[test]
fn half_precision_rounds_and_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let c = sample(1, PrecisionTag::Half);
    let path = save_checkpoint(&c, tmp.path()).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.precision_tag, PrecisionTag::Half);
    let warning = back.precision_warning().unwrap();
    assert!(warning.starts_with("WARNING"));
    let mut max_rel = 0.0f64;
    for (a, b) in back.params.data.iter().zip(&c.params.data) {
        if *b != 0.0 {
            max_rel = max_rel.max(((a - b) / b).abs());
        }
    }
    // bf16 keeps 8 significant bits
    assert!(max_rel > 0.0 && max_rel <= 1.0 / 256.0, "{max_rel}");
}

#[test]
fn corruption_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = save_checkpoint(&sample(2, PrecisionTag::Full), tmp.path()).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Integrity { .. })));

    bytes[mid] ^= 0x10;
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn sidecar_mismatch_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = save_checkpoint(&sample(2, PrecisionTag::Full), tmp.path()).unwrap();
    let sidecar = path.with_file_name(format!("{}.sha256", path.file_name().unwrap().to_string_lossy()));
    assert!(sidecar.exists());
    fs::write(&sidecar, format!("{}  ckpt\n", "0".repeat(64))).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Integrity { detail, .. }) => assert!(detail.contains("sidecar")),
        other => panic!("expected sidecar failure, got {other:?}"),
    }
}

#[test]
fn weights_only_checkpoint_refuses_exact_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = sample(5, PrecisionTag::Full);
    c.optimizer = None;
    let path = save_checkpoint(&c, tmp.path()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::MissingOptimizerState { .. })));
    let w = load_weights(&path).unwrap();
    assert!(w.params.bit_identical(&c.params));
}

#[test]
fn listing_ignores_temporaries() {
    let tmp = tempfile::tempdir().unwrap();
    for i in [0, 2, 1] {
        save_checkpoint(&sample(i, PrecisionTag::Full), tmp.path()).unwrap();
    }
    fs::write(tmp.path().join(".ckpt_00003.lckp.tmp"), b"partial").unwrap();
    let found: Vec<u32> = list_checkpoints(tmp.path()).unwrap().into_iter().map(|(i, _)| i).collect();
    assert_eq!(found, vec![0, 1, 2]);
}

fn record(step: u64) -> MetricsRecord {
    MetricsRecord {
        step,
        chunk: (step / 50) as u32,
        loss: 5.0 / (1.0 + step as f64),
        grad_norm_preclip: 0.5 + (step % 7) as f64,
        lr: 3e-4 * (step as f64 / 1e4),
        tokens_per_second: 7000.0,
        wall_time: 1.7e9 + step as f64,
    }
}

#[test]
fn ten_thousand_rows_export_to_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let jsonl = tmp.path().join("metrics.jsonl");
    let mut ledger = MetricsLedger::create(&jsonl).unwrap();
    let rows: Vec<MetricsRecord> = (1..=10_000).map(record).collect();
    ledger.append_all(&rows).unwrap();
    ledger.sync().unwrap();
    assert_eq!(ledger.len(), 10_000);

    let csv_path = tmp.path().join("out/metrics.csv");
    let hash = export_metrics_csv(&jsonl, &csv_path).unwrap();
    assert_eq!(hash.len(), 64);
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,chunk,loss,grad_norm_preclip,lr,tokens_per_second,wall_time"
    );
    let parsed: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(parsed.len(), 10_000);
    for (row, r) in parsed.iter().zip(&rows) {
        assert_eq!(row[0], r.step as f64);
        assert_eq!(row[2], r.loss);
        assert_eq!(row[4], r.lr);
    }
    assert_eq!(export_metrics_csv(&jsonl, &tmp.path().join("again.csv")).unwrap(), hash);
}

#[test]
fn ledger_rejects_non_increasing_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let jsonl = tmp.path().join("metrics.jsonl");
    let mut ledger = MetricsLedger::create(&jsonl).unwrap();
    ledger.append(&record(5)).unwrap();
    assert!(ledger.append_all(&[record(6), record(6)]).is_err());
    assert_eq!(ledger.len(), 1);
    assert!(ledger.append(&record(5)).is_err());
    ledger.append(&record(7)).unwrap();
    drop(ledger);
    assert_eq!(MetricsLedger::open(&jsonl).unwrap().last_step(), Some(7));
}

#[test]
fn query_and_truncate() {
    let tmp = tempfile::tempdir().unwrap();
    let jsonl = tmp.path().join("metrics.jsonl");
    let mut ledger = MetricsLedger::create(&jsonl).unwrap();
    ledger.append_all(&(1..=100).map(record).collect::<Vec<_>>()).unwrap();
    drop(ledger);
    let mid = query_metrics(&jsonl, 10..20).unwrap();
    assert_eq!(mid.iter().map(|r| r.step).collect::<Vec<_>>(), (10..20).collect::<Vec<_>>());
    assert_eq!(truncate_metrics(&jsonl, 40).unwrap(), 40);
    assert_eq!(MetricsLedger::open(&jsonl).unwrap().last_step(), Some(40));
}
