//! Checkpoint store, metrics ledger and held-out evaluation.

pub mod checkpoint;
pub mod eval;
pub mod metrics;

pub use checkpoint::{
    checkpoint_file_name, checkpoint_hash, checkpoint_path, encode_checkpoint, list_checkpoints, load_checkpoint,
    load_checkpoint_for, load_weights, save_checkpoint, Checkpoint, PrecisionTag,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use eval::{count_overlap, eval_perplexity, mean_nll, EvalReport};
pub use metrics::{
    export_metrics_csv, query_metrics, truncate_metrics, MetricsLedger, MetricsRecord, METRICS_FILE,
};
