//! Chunk-by-chunk training with AdamW, NaN recovery and exact resume.

pub mod optim;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_gradients, global_norm, lr_at, OptimizerState};

use crate::corpus::{ChunkData, CorpusManifest};
use crate::error::{Error, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::model::{init_parameters, loss_and_grad, ModelConfig, ParameterSet};
use crate::registry::{
    checkpoint_path, load_checkpoint, save_checkpoint, truncate_metrics, Checkpoint, MetricsLedger,
    MetricsRecord, PrecisionTag, CHECKPOINT_SCHEMA_VERSION, METRICS_FILE,
};
use crate::rng::Rng;
use crate::tokenizer::PAD_ID;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const NAN_LEDGER_FILE: &str = "nan_ledger.json";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    /// Abandon the chunk and continue from the state at its start.
    #[default]
    SkipChunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionPolicy {
    /// Once the chunk sequence is exhausted, retrain the earliest successfully
    /// trained chunks, one per skipped chunk, to finish the schedule.
    #[default]
    FirstChunks,
    /// Leave the schedule short.
    None,
}

/// Optimizer and schedule hyperparameters. Defaults are the Amber recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub batch_size_sequences: usize,
    /// Defaults to one pass over every chunk of the manifest.
    pub total_steps: Option<u64>,
    pub nan_policy: NanPolicy,
    pub completion_policy: CompletionPolicy,
    /// Extra attempts for a failing chunk, each with a fresh batch order.
    pub nan_retries: u32,
    pub seed: u64,
    pub checkpoint_precision: PrecisionTag,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            peak_lr: 3e-4,
            final_lr: 3e-5,
            weight_decay: 0.1,
            clip_norm: 1.0,
            warmup_steps: 2000,
            batch_size_sequences: 2240,
            total_steps: None,
            nan_policy: NanPolicy::SkipChunk,
            completion_policy: CompletionPolicy::FirstChunks,
            nan_retries: 0,
            seed: 0,
            checkpoint_precision: PrecisionTag::Full,
        }
    }
}

impl TrainPlan {
    /// Checks the plan against the step budget it will run with.
    pub fn validate(&self, total_steps: u64) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr) {
            return bad(format!(
                "need 0 < final_lr ≤ peak_lr, got {} and {}",
                self.final_lr, self.peak_lr
            ));
        }
        if self.warmup_steps >= total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {total_steps}",
                self.warmup_steps
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch_size_sequences == 0 {
            return bad("batch_size_sequences must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay nonnegative".into());
        }
        Ok(())
    }

    /// One optimizer step per batch of every chunk in `manifest`.
    pub fn steps_for(&self, manifest: &CorpusManifest) -> u64 {
        let b = self.batch_size_sequences.max(1) as u64;
        manifest.chunks.iter().map(|c| c.sequences.div_ceil(b)).sum()
    }

    pub fn resolved_total_steps(&self, manifest: &CorpusManifest) -> u64 {
        self.total_steps.unwrap_or_else(|| self.steps_for(manifest))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    NanLoss,
    NonfiniteGrad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NanEntry {
    pub chunk: u32,
    /// Global step at which the failure surfaced.
    pub step: u64,
    pub kind: FailureKind,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    /// Position in the training queue the substitute occupies.
    pub slot: usize,
    pub chunk: u32,
}

/// Append-only record of abandoned chunks and how the schedule was completed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NanLedger {
    pub policy: CompletionPolicy,
    pub entries: Vec<NanEntry>,
    pub substitutions: Vec<Substitution>,
}

impl NanLedger {
    pub fn record(&mut self, entry: NanEntry) {
        self.entries.push(entry);
    }

    /// Chunks that were abandoned after all attempts, in order.
    pub fn skipped_chunks(&self, retries: u32) -> Vec<u32> {
        self.entries
            .iter()
            .filter(|e| e.attempt == retries)
            .map(|e| e.chunk)
            .collect()
    }

    pub fn failed_chunks(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.chunk).collect()
    }
}

/// Where a run stands in its chunk schedule; stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Chunks to train, in order; substitutes are appended at the end.
    pub queue: Vec<u32>,
    /// Next queue position.
    pub cursor: usize,
    /// Successfully trained chunks, in training order.
    pub trained: Vec<u32>,
    pub total_steps: u64,
    pub ledger: NanLedger,
}

impl TrainProgress {
    pub fn new(n_chunks: u32, total_steps: u64, policy: CompletionPolicy) -> Self {
        Self {
            queue: (0..n_chunks).collect(),
            cursor: 0,
            trained: Vec::new(),
            total_steps,
            ledger: NanLedger {
                policy,
                ..NanLedger::default()
            },
        }
    }

    /// Queues the next substitute if the completion policy calls for one.
    fn extend_queue(&mut self, n_chunks: u32) -> bool {
        if self.ledger.policy == CompletionPolicy::None || self.trained.len() >= n_chunks as usize {
            return false;
        }
        let used: BTreeSet<u32> = self.ledger.substitutions.iter().map(|s| s.chunk).collect();
        let failed = self.ledger.failed_chunks();
        let next = self
            .trained
            .iter()
            .copied()
            .find(|c| !used.contains(c) && !failed.contains(c));
        match next {
            Some(chunk) => {
                self.ledger.substitutions.push(Substitution {
                    slot: self.queue.len(),
                    chunk,
                });
                self.queue.push(chunk);
                true
            }
            None => false,
        }
    }
}

/// Mutable training state: everything an exact resume needs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(cfg: &ModelConfig, plan: &TrainPlan) -> Result<Self> {
        let params = init_parameters(cfg, plan.seed)?;
        let n = params.len();
        Ok(Self {
            params,
            optimizer: OptimizerState::new(n),
            rng: Rng::derive(plan.seed, "train"),
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChunkOutcome {
    Completed(Vec<MetricsRecord>),
    Failed { kind: FailureKind, step: u64 },
}

fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Trains one pass over `data` in a shuffled batch order.
///
/// On a non-finite loss or gradient the state is restored to what it was on
/// entry and the failure is returned; `poison` forces the loss of the middle
/// batch to NaN.
pub fn train_chunk(
    state: &mut TrainState,
    chunk: u32,
    data: &ChunkData,
    cfg: &ModelConfig,
    plan: &TrainPlan,
    total_steps: u64,
    poison: bool,
) -> Result<ChunkOutcome> {
    let snapshot = state.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    state.rng.shuffle(&mut order);
    let batches: Vec<&[usize]> = order.chunks(plan.batch_size_sequences).collect();
    let poisoned = poison.then_some(batches.len() / 2);
    let mut records = Vec::with_capacity(batches.len());
    for (b, idx) in batches.iter().enumerate() {
        let rows: Vec<&[u16]> = idx.iter().map(|&i| data.sequence(i)).collect();
        if rows.iter().all(|r| r[1..].iter().all(|&t| t == PAD_ID)) {
            continue;
        }
        let started = Instant::now();
        let step = state.step + 1;
        let lr = lr_at(step, plan, total_steps);
        let mut out = loss_and_grad(&state.params, cfg, &rows)?;
        if poisoned == Some(b) {
            out.loss = f64::NAN;
        }
        let failure = if !out.loss.is_finite() {
            Some(FailureKind::NanLoss)
        } else {
            match clip_gradients(&mut out.grads, plan.clip_norm) {
                Ok(norm) => {
                    adamw_step(&mut state.params.data, &out.grads, &mut state.optimizer, lr, plan)?;
                    state.step = step;
                    let secs = started.elapsed().as_secs_f64().max(1e-9);
                    records.push(MetricsRecord {
                        step,
                        chunk,
                        loss: out.loss,
                        grad_norm_preclip: norm,
                        lr,
                        tokens_per_second: out.count as f64 / secs,
                        wall_time: unix_time(),
                    });
                    None
                }
                Err(e) if e.is_numerical() => Some(FailureKind::NonfiniteGrad),
                Err(e) => return Err(e),
            }
        };
        if let Some(kind) = failure {
            *state = snapshot;
            return Ok(ChunkOutcome::Failed { kind, step });
        }
    }
    Ok(ChunkOutcome::Completed(records))
}

/// Inputs to [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub resume: Option<PathBuf>,
    /// Chunks whose middle batch is forced to a NaN loss.
    pub inject_nan_chunks: BTreeSet<u32>,
    /// Stop once this many chunks have been trained.
    pub stop_after: Option<u32>,
}

impl TrainOptions {
    pub fn new(manifest: &Path, out_dir: &Path, model: ModelConfig, plan: TrainPlan) -> Self {
        Self {
            manifest: manifest.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            model,
            plan,
            resume: None,
            inject_nan_chunks: BTreeSet::new(),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Checkpoints written by this invocation, in order.
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub step: u64,
    pub trained: Vec<u32>,
    pub ledger: NanLedger,
    pub warnings: Vec<String>,
}

/// Contents of `run.json`, rewritten whenever training starts or resumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    /// Manifest path as given to the trainer.
    pub manifest: PathBuf,
    pub manifest_checksum: String,
    pub total_steps: u64,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn check_compatible(cfg: &ModelConfig, manifest: &CorpusManifest) -> Result<()> {
    if cfg.vocab_size < manifest.vocab_size {
        return Err(Error::Invalid(format!(
            "model vocab {} is smaller than the tokenizer's {}",
            cfg.vocab_size, manifest.vocab_size
        )));
    }
    if manifest.max_seq_len < 2 || manifest.max_seq_len - 1 > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "windows of {} tokens do not fit model max_seq_len {}",
            manifest.max_seq_len, cfg.max_seq_len
        )));
    }
    Ok(())
}

/// Trains over the manifest's chunks, checkpointing at every boundary.
///
/// A fresh run writes checkpoint 0 before training. Checkpoint `i` holds the
/// state after `i` successfully trained chunks.
pub fn run_training(opts: &TrainOptions) -> Result<TrainSummary> {
    let manifest = CorpusManifest::load(&opts.manifest)?;
    let data_dir = opts.manifest.parent().unwrap_or(Path::new("."));
    let cfg = &opts.model;
    let plan = &opts.plan;
    cfg.validate()?;
    check_compatible(cfg, &manifest)?;
    let checksum = manifest.checksum();
    let ckpt_dir = opts.out_dir.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let mut warnings = Vec::new();
    let mut written = Vec::new();

    let (mut state, mut progress, mut metrics) = match &opts.resume {
        Some(path) => {
            let c = load_checkpoint(path)?;
            if c.manifest_checksum != checksum {
                return Err(Error::ManifestMismatch {
                    expected: checksum,
                    found: c.manifest_checksum,
                });
            }
            c.check_model(cfg)?;
            warnings.extend(c.precision_warning());
            let optimizer = c.optimizer.ok_or_else(|| Error::MissingOptimizerState { path: path.clone() })?;
            let state = TrainState {
                params: c.params,
                optimizer,
                rng: Rng::from_bytes(&c.rng_state)?,
                step: c.step,
            };
            truncate_metrics(&metrics_path, c.step)?;
            (state, c.progress, MetricsLedger::open(&metrics_path)?)
        }
        None => {
            let total = plan.resolved_total_steps(&manifest);
            let progress = TrainProgress::new(manifest.n_chunks, total, plan.completion_policy);
            (TrainState::fresh(cfg, plan)?, progress, MetricsLedger::create(&metrics_path)?)
        }
    };
    plan.validate(progress.total_steps)?;
    write_json(
        &opts.out_dir.join(RUN_FILE),
        &RunRecord {
            model: cfg.clone(),
            plan: plan.clone(),
            manifest: opts.manifest.clone(),
            manifest_checksum: checksum.clone(),
            total_steps: progress.total_steps,
        },
    )?;

    let save = |state: &TrainState, progress: &TrainProgress| -> Result<PathBuf> {
        let c = Checkpoint {
            index: progress.trained.len() as u32,
            step: state.step,
            model: cfg.clone(),
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            rng_state: state.rng.to_bytes().to_vec(),
            precision_tag: plan.checkpoint_precision,
            manifest_checksum: checksum.clone(),
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            progress: progress.clone(),
        };
        save_checkpoint(&c, &ckpt_dir)
    };
    if opts.resume.is_none() {
        written.push(save(&state, &progress)?);
    }

    loop {
        if opts.stop_after.is_some_and(|k| progress.trained.len() >= k as usize) {
            break;
        }
        if progress.cursor == progress.queue.len() && !progress.extend_queue(manifest.n_chunks) {
            break;
        }
        let chunk = progress.queue[progress.cursor];
        let data = manifest.load_chunk(data_dir, chunk)?;
        let poison = opts.inject_nan_chunks.contains(&chunk);
        let entry_rng = state.rng.clone();
        for attempt in 0..=plan.nan_retries {
            if attempt > 0 {
                let seed = state.rng.next_u64();
                state.rng = Rng::derive(seed, &format!("retry/{chunk}/{attempt}"));
            }
            match train_chunk(&mut state, chunk, &data, cfg, plan, progress.total_steps, poison)? {
                ChunkOutcome::Completed(records) => {
                    metrics.append_all(&records)?;
                    metrics.sync()?;
                    progress.cursor += 1;
                    progress.trained.push(chunk);
                    written.push(save(&state, &progress)?);
                    break;
                }
                ChunkOutcome::Failed { kind, step } => {
                    progress.ledger.record(NanEntry {
                        chunk,
                        step,
                        kind,
                        attempt,
                    });
                    if attempt == plan.nan_retries {
                        state.rng = entry_rng.clone();
                        progress.cursor += 1;
                    }
                }
            }
        }
        write_json(&opts.out_dir.join(NAN_LEDGER_FILE), &progress.ledger)?;
    }
    write_json(&opts.out_dir.join(NAN_LEDGER_FILE), &progress.ledger)?;
    Ok(TrainSummary {
        final_checkpoint: checkpoint_path(&ckpt_dir, progress.trained.len() as u32),
        checkpoints: written,
        step: state.step,
        trained: progress.trained,
        ledger: progress.ledger,
        warnings,
    })
}
