//! End-to-end desk reproduction: prepare, train, evaluate, analyze, report.
//!
//! Output layout under the configured root:
//!
//! ```text
//! sources/            generated sources (only with [synthetic])
//! data/               chunks, heldout.bin, origins.csv, manifest.json
//! run/                checkpoints/, metrics.jsonl, nan_ledger.json, run.json
//! eval/perplexity.csv
//! analysis/           memorization tables and summary.json
//! metrics.csv
//! provenance.json
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_run, emit_report};
use crate::config::{RunConfig, SYNTH_DIR};
use crate::corpus::{prepare_corpus, verify_manifest, ChunkData, CorpusManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::hash::{sha256_file, sha256_hex};
use crate::registry::{
    eval_perplexity, export_metrics_csv, list_checkpoints, load_weights, query_metrics, EvalReport, METRICS_FILE,
};
use crate::synth::generate_corpus;
use crate::trainer::{run_training, TrainOptions, CHECKPOINT_DIR, NAN_LEDGER_FILE, RUN_FILE};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const PROVENANCE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Prepare,
    Train,
    Eval,
    Memorize,
    Report,
}

impl Stage {
    /// Process exit status used by the command line for a failure here.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Prepare => 3,
            Stage::Train => 4,
            Stage::Eval => 5,
            Stage::Memorize => 6,
            Stage::Report => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Prepare => "prepare",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Memorize => "memorize",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// A file under the output root and its SHA-256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointArtifact {
    pub index: u32,
    pub step: u64,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsArtifacts {
    pub jsonl: String,
    pub csv: String,
    /// Hash over step, chunk, loss, pre-clip gradient norm and learning
    /// rate; timing columns vary between runs and are excluded.
    pub content_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub manifest: Artifact,
    pub manifest_checksum: String,
    pub sources: Vec<Artifact>,
    pub data: Vec<Artifact>,
    pub run: Vec<Artifact>,
    pub checkpoints: Vec<CheckpointArtifact>,
    pub metrics: MetricsArtifacts,
    pub evaluations: Vec<EvalReport>,
    pub eval: Artifact,
    pub analysis: Vec<Artifact>,
    pub warnings: Vec<String>,
}

fn artifact(root: &Path, path: &Path) -> Result<Artifact> {
    let rel = path.strip_prefix(root).unwrap_or(path);
    Ok(Artifact {
        path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
        sha256: sha256_file(path)?,
    })
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Hash of the run-invariant metrics columns.
pub fn metrics_content_hash(jsonl: &Path) -> Result<String> {
    let mut s = String::new();
    for r in query_metrics(jsonl, ..)? {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.chunk, r.loss, r.grad_norm_preclip, r.lr);
    }
    Ok(sha256_hex(s.as_bytes()))
}

fn write_perplexity_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["checkpoint", "step", "perplexity", "mean_nll", "tokens"])
        .map_err(fmt_err)?;
    for r in reports {
        w.write_record([
            r.checkpoint.to_string(),
            r.step.to_string(),
            r.perplexity.to_string(),
            r.mean_nll.to_string(),
            r.tokens.to_string(),
        ])
        .map_err(fmt_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

/// Runs every stage for `cfg` and writes `provenance.json`.
///
/// Relative paths in the configuration resolve against `base_dir`. With
/// `resume`, training continues from the newest checkpoint in the run
/// directory instead of starting over. Reruns with the same configuration
/// write a byte-identical provenance file.
pub fn reproduce_desk(cfg: &RunConfig, base_dir: &Path, resume: bool) -> Result<Provenance, StageError> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
    let root = resolve(&cfg.output_root);
    let data_dir = root.join("data");
    let run_dir = root.join("run");
    let eval_dir = root.join("eval");
    let analysis_dir = root.join("analysis");
    let mut warnings = Vec::new();

    let memorize_opts = cfg.analysis.options().at(Stage::Config)?;
    create_dir(&root).at(Stage::Prepare)?;
    let mut sources = Vec::new();
    if let Some(synth) = &cfg.synthetic {
        for s in generate_corpus(synth, &root.join(SYNTH_DIR)).at(Stage::Prepare)? {
            sources.push(artifact(&root, &s.path).at(Stage::Prepare)?);
        }
    }
    let manifest = prepare_corpus(&cfg.corpus_spec(), base_dir, cfg.seed, cfg.corpus.n_chunks, &data_dir)
        .at(Stage::Prepare)?;
    let report = verify_manifest(&manifest, &data_dir);
    if let Some(bad) = report.failures().next() {
        return Err(StageError {
            stage: Stage::Prepare,
            source: Error::Integrity {
                path: data_dir.join(&bad.file),
                detail: format!("{:?}", bad.status),
            },
        });
    }
    let manifest_path = data_dir.join(MANIFEST_FILE);
    let mut data = Vec::new();
    for c in manifest.chunks.iter().chain(manifest.heldout.iter()) {
        data.push(artifact(&root, &data_dir.join(&c.file)).at(Stage::Prepare)?);
    }
    data.push(artifact(&root, &data_dir.join(&manifest.origins.file)).at(Stage::Prepare)?);

    let mut opts = TrainOptions::new(&manifest_path, &run_dir, cfg.model.clone(), cfg.train.clone());
    if resume {
        let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
        if ckpt_dir.is_dir() {
            opts.resume = list_checkpoints(&ckpt_dir).at(Stage::Train)?.pop().map(|(_, p)| p);
        }
    }
    let summary = run_training(&opts).at(Stage::Train)?;
    warnings.extend(summary.warnings);

    let heldout = match &manifest.heldout {
        Some(h) => ChunkData::read(&data_dir.join(&h.file)).at(Stage::Eval)?,
        None => {
            return Err(StageError {
                stage: Stage::Eval,
                source: Error::Invalid("corpus.heldout_sequences is 0; nothing to evaluate".into()),
            })
        }
    };
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    let mut checkpoints = Vec::new();
    let mut evaluations = Vec::new();
    for (index, path) in list_checkpoints(&ckpt_dir).at(Stage::Eval)? {
        let c = load_weights(&path).at(Stage::Eval)?;
        let r = eval_perplexity(&c, &heldout, &manifest, &data_dir).at(Stage::Eval)?;
        warnings.extend(r.warnings.iter().cloned());
        let a = artifact(&root, &path).at(Stage::Eval)?;
        checkpoints.push(CheckpointArtifact {
            index,
            step: c.step,
            path: a.path,
            sha256: a.sha256,
        });
        evaluations.push(r);
    }
    create_dir(&eval_dir).at(Stage::Eval)?;
    let ppl_path = eval_dir.join("perplexity.csv");
    write_perplexity_csv(&ppl_path, &evaluations).at(Stage::Eval)?;

    let mem = analyze_run(&ckpt_dir, &manifest, &data_dir, &memorize_opts).at(Stage::Memorize)?;
    warnings.extend(mem.warnings.iter().cloned());

    let written = emit_report(&mem, &analysis_dir).at(Stage::Report)?;
    let analysis = written
        .iter()
        .map(|p| artifact(&root, p))
        .collect::<Result<Vec<_>>>()
        .at(Stage::Report)?;
    let jsonl = run_dir.join(METRICS_FILE);
    let csv_path = root.join("metrics.csv");
    export_metrics_csv(&jsonl, &csv_path).at(Stage::Report)?;
    let run = [RUN_FILE, NAN_LEDGER_FILE]
        .iter()
        .map(|f| artifact(&root, &run_dir.join(f)))
        .collect::<Result<Vec<_>>>()
        .at(Stage::Report)?;
    let rel = |p: &Path| artifact(&root, p).map(|a| a.path);
    warnings.sort();
    warnings.dedup();
    let provenance = Provenance {
        schema_version: PROVENANCE_SCHEMA_VERSION,
        config_sha256: sha256_hex(&json_bytes(cfg).at(Stage::Report)?),
        seed: cfg.seed,
        manifest: artifact(&root, &manifest_path).at(Stage::Report)?,
        manifest_checksum: manifest.checksum(),
        sources,
        data,
        run,
        checkpoints,
        metrics: MetricsArtifacts {
            jsonl: rel(&jsonl).at(Stage::Report)?,
            csv: rel(&csv_path).at(Stage::Report)?,
            content_sha256: metrics_content_hash(&jsonl).at(Stage::Report)?,
        },
        evaluations,
        eval: artifact(&root, &ppl_path).at(Stage::Report)?,
        analysis,
        warnings,
    };
    write_atomic(&root.join(PROVENANCE_FILE), &json_bytes(&provenance).at(Stage::Report)?).at(Stage::Report)?;
    Ok(provenance)
}

/// Location of the provenance file for a configuration.
pub fn provenance_path(cfg: &RunConfig, base_dir: &Path) -> PathBuf {
    let root = if cfg.output_root.is_absolute() {
        cfg.output_root.clone()
    } else {
        base_dir.join(&cfg.output_root)
    };
    root.join(PROVENANCE_FILE)
}

/// Loads a manifest, mapping failures to the prepare stage.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, StageError> {
    CorpusManifest::load(path).at(Stage::Prepare)
}
