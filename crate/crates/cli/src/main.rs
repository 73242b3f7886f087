use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ledgerlm::analysis::{analyze_run, emit_report, CheckpointSelection, MemorizeOptions};
use ledgerlm::config::{load_config, load_plan};
use ledgerlm::corpus::{prepare_corpus, verify_manifest, ChunkData, CorpusManifest, CorpusSpec, MANIFEST_FILE};
use ledgerlm::pipeline::{reproduce_desk, Stage, StageError};
use ledgerlm::registry::{eval_perplexity, export_metrics_csv, load_weights, METRICS_FILE};
use ledgerlm::synth::{generate_corpus, sources_toml, SynthSpec};
use ledgerlm::trainer::{run_training, RunRecord, TrainOptions, CHECKPOINT_DIR};
use ledgerlm::Error;

/// Reproducible desk-scale LLM pretraining with full provenance.
///
/// Exit status: 0 on success, 2 for configuration or usage errors, 3 data
/// preparation, 4 training, 5 evaluation, 6 memorization analysis, 7 report
/// and export.
#[derive(Parser)]
#[command(name = "ledgerlm", version)]
struct Cli {
    /// Print failures to stderr as one JSON object instead of text.
    #[arg(long, global = true)]
    json_errors: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, pack, permute and chunk a corpus, writing a checksummed manifest.
    PrepareData(PrepareArgs),
    /// Recompute every checksum and count listed in a manifest.
    VerifyData {
        /// Path to manifest.json.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train over the chunks of a manifest, checkpointing after every chunk.
    Train(TrainArgs),
    /// Held-out perplexity of one checkpoint.
    Eval(EvalArgs),
    /// Memorization scores across the checkpoints of a run.
    Memorize(MemorizeArgs),
    /// Write the metrics ledger of a run as CSV.
    ExportMetrics {
        /// Training output directory holding metrics.jsonl.
        #[arg(long)]
        run: PathBuf,
        /// Destination CSV file.
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run prepare, train, eval, memorize and report from one config file.
    ReproduceDesk {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Continue training from the newest checkpoint of a previous attempt.
        #[arg(long)]
        resume: bool,
    },
    /// Check a run configuration and list every violated rule.
    ValidateConfig {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate seeded synthetic source files.
    GenCorpus {
        /// Synthetic source description (TOML with `seed` and `[[sources]]`).
        #[arg(long)]
        spec: PathBuf,
        /// Directory receiving one `<name>.txt` per source.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PrepareArgs {
    /// Source list (TOML or JSON): max_seq_len, heldout_sequences, sources, stages.
    #[arg(long)]
    sources: PathBuf,
    /// Seed of the global permutation.
    #[arg(long)]
    seed: u64,
    /// Number of chunks.
    #[arg(long)]
    chunks: u32,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the corpus manifest.json.
    #[arg(long)]
    manifest: PathBuf,
    /// TOML with `[model]` and `[train]` tables; a full run config also works.
    #[arg(long)]
    plan: PathBuf,
    /// Run directory for checkpoints, metrics and ledgers.
    #[arg(long)]
    out: PathBuf,
    /// Continue exactly from this checkpoint (needs optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fixed reduction order and seeded data order. Always on; accepted for
    /// compatibility with scripts that pass it.
    #[arg(long = "deterministic")]
    _deterministic: bool,
    /// Test hook: force a NaN loss inside this chunk. Repeatable.
    #[arg(long = "inject-nan-chunk", value_name = "CHUNK")]
    inject_nan_chunk: Vec<u32>,
    /// Stop after this many chunks have been trained.
    #[arg(long)]
    stop_after: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Held-out chunk file.
    #[arg(long)]
    heldout: PathBuf,
    /// Manifest used for the leakage check; defaults to manifest.json next to the held-out file.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct MemorizeArgs {
    /// Training output directory.
    #[arg(long)]
    run: PathBuf,
    /// Probes sampled per chunk.
    #[arg(long, default_value_t = 1000)]
    n_probes: usize,
    /// Prompt length.
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// Continuation length.
    #[arg(long, default_value_t = 32)]
    l: usize,
    /// `all`, `autoN` or a comma-separated list of checkpoint indices.
    #[arg(long, default_value = "auto10")]
    checkpoints: CheckpointSelection,
    /// Probe sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; defaults to the one recorded in the run's run.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; defaults to `<run>/analysis`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |source| StageError { stage, source }
}

fn parent_dir(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn prepare(a: PrepareArgs) -> Result<(), StageError> {
    let spec = CorpusSpec::load(&a.sources).map_err(at(Stage::Config))?;
    let m = prepare_corpus(&spec, parent_dir(&a.sources), a.seed, a.chunks, &a.out).map_err(at(Stage::Prepare))?;
    println!(
        "wrote {} chunks, {} sequences, {} tokens",
        m.chunks.len(),
        m.total_sequences(),
        m.total_tokens
    );
    println!("manifest {} checksum {}", a.out.join(MANIFEST_FILE).display(), m.checksum());
    Ok(())
}

fn verify(manifest: &Path) -> Result<(), StageError> {
    let m = CorpusManifest::load(manifest).map_err(at(Stage::Prepare))?;
    let report = verify_manifest(&m, parent_dir(manifest));
    let mut failed = 0;
    for e in report.failures() {
        failed += 1;
        eprintln!("FAIL {} {:?}", e.file, e.status);
    }
    if failed > 0 {
        return Err(StageError {
            stage: Stage::Prepare,
            source: Error::Integrity {
                path: manifest.to_path_buf(),
                detail: format!("{failed} of {} entries failed verification", report.entries.len()),
            },
        });
    }
    println!("ok: {} entries verified", report.entries.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), StageError> {
    let plan = load_plan(&a.plan).map_err(at(Stage::Config))?;
    let mut opts = TrainOptions::new(&a.manifest, &a.out, plan.model, plan.train);
    opts.resume = a.resume;
    opts.inject_nan_chunks = a.inject_nan_chunk.into_iter().collect::<BTreeSet<_>>();
    opts.stop_after = a.stop_after;
    let s = run_training(&opts).map_err(at(Stage::Train))?;
    for w in &s.warnings {
        eprintln!("{w}");
    }
    println!(
        "trained {} chunks in {} steps; {} checkpoints written",
        s.trained.len(),
        s.step,
        s.checkpoints.len()
    );
    let skipped = s.ledger.failed_chunks();
    if !skipped.is_empty() {
        println!("non-finite chunks skipped: {skipped:?}");
    }
    println!("final checkpoint {}", s.final_checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), StageError> {
    let manifest_path = a.manifest.unwrap_or_else(|| parent_dir(&a.heldout).join(MANIFEST_FILE));
    let manifest = CorpusManifest::load(&manifest_path).map_err(at(Stage::Eval))?;
    let ckpt = load_weights(&a.ckpt).map_err(at(Stage::Eval))?;
    let heldout = ChunkData::read(&a.heldout).map_err(at(Stage::Eval))?;
    let r = eval_perplexity(&ckpt, &heldout, &manifest, parent_dir(&manifest_path)).map_err(at(Stage::Eval))?;
    for w in &r.warnings {
        eprintln!("{w}");
    }
    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    Ok(())
}

fn memorize(a: MemorizeArgs) -> Result<(), StageError> {
    let manifest_path = match a.manifest {
        Some(p) => p,
        None => RunRecord::load(&a.run).map_err(at(Stage::Memorize))?.manifest,
    };
    let manifest = CorpusManifest::load(&manifest_path).map_err(at(Stage::Memorize))?;
    let opts = MemorizeOptions {
        n_probes: a.n_probes,
        k: a.k,
        l: a.l,
        seed: a.seed,
        checkpoints: a.checkpoints,
    };
    let report = analyze_run(&a.run.join(CHECKPOINT_DIR), &manifest, parent_dir(&manifest_path), &opts)
        .map_err(at(Stage::Memorize))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = a.out.unwrap_or_else(|| a.run.join("analysis"));
    let files = emit_report(&report, &out).map_err(at(Stage::Report))?;
    for r in &report.results {
        println!(
            "checkpoint {:>4}  mean {:.5}  extractible {:.4}  probes {}",
            r.checkpoint,
            r.mean_score().unwrap_or(f64::NAN),
            r.extractible_fraction().unwrap_or(f64::NAN),
            r.evaluated()
        );
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::PrepareData(a) => prepare(a),
        Command::VerifyData { manifest } => verify(&manifest),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Memorize(a) => memorize(a),
        Command::ExportMetrics { run, csv } => {
            let hash = export_metrics_csv(&run.join(METRICS_FILE), &csv).map_err(at(Stage::Report))?;
            println!("{}  {}", hash, csv.display());
            Ok(())
        }
        Command::ReproduceDesk { config, resume } => {
            let cfg = load_config(&config).map_err(at(Stage::Config))?;
            let p = reproduce_desk(&cfg, parent_dir(&config), resume)?;
            for w in &p.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "manifest {}; {} checkpoints; {} analysis files",
                p.manifest_checksum,
                p.checkpoints.len(),
                p.analysis.len()
            );
            if let (Some(first), Some(last)) = (p.evaluations.first(), p.evaluations.last()) {
                println!("perplexity {:.3} -> {:.3}", first.perplexity, last.perplexity);
            }
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config).map_err(at(Stage::Config))?;
            println!("ok: schema {} output_root {}", cfg.schema_version, cfg.output_root.display());
            Ok(())
        }
        Command::GenCorpus { spec, out } => {
            let s = SynthSpec::load(&spec).map_err(at(Stage::Config))?;
            let sources = generate_corpus(&s, &out).map_err(at(Stage::Prepare))?;
            print!("{}", sources_toml(&sources, &out));
            Ok(())
        }
    }
}

fn report_error(e: &StageError, json: bool) {
    if json {
        let issues = match &e.source {
            Error::Config(list) => serde_json::to_value(list).unwrap_or_default(),
            _ => json!([]),
        };
        let v = json!({
            "stage": e.stage.name(),
            "exit_code": e.stage.exit_code(),
            "error": e.source.to_string(),
            "issues": issues,
        });
        eprintln!("{v}");
    } else {
        eprintln!("error: {e}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, json);
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
