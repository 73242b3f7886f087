//! The unified run configuration and its cross-field validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{CheckpointSelection, MemorizeOptions};
use crate::corpus::{CorpusSpec, SourceSpec};
use crate::error::{ConfigIssue, Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::tokenizer::VOCAB_SIZE;
use crate::trainer::TrainPlan;

pub const RUN_CONFIG_SCHEMA_VERSION: u32 = 1;

fn default_n_chunks() -> u32 {
    360
}

fn default_max_seq_len() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    #[serde(default = "default_n_chunks")]
    pub n_chunks: u32,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub heldout_sequences: usize,
    /// May be omitted when `[synthetic]` generates the sources.
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub stages: Vec<BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub n_probes: usize,
    pub k: usize,
    pub l: usize,
    pub seed: u64,
    /// `all`, `autoN` or a comma-separated list of checkpoint indices.
    pub checkpoints: String,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            n_probes: 1000,
            k: 32,
            l: 32,
            seed: 0,
            checkpoints: "auto10".into(),
        }
    }
}

impl AnalysisSection {
    pub fn options(&self) -> Result<MemorizeOptions> {
        Ok(MemorizeOptions {
            n_probes: self.n_probes,
            k: self.k,
            l: self.l,
            seed: self.seed,
            checkpoints: self.checkpoints.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seed of the global permutation; recorded in the manifest.
    pub seed: u64,
    pub output_root: PathBuf,
    pub corpus: CorpusSection,
    pub synthetic: Option<SynthSpec>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

/// Directory under the output root holding generated sources.
pub const SYNTH_DIR: &str = "sources";

impl RunConfig {
    /// Source list with generated sources filled in, paths relative to `base`.
    pub fn corpus_spec(&self) -> CorpusSpec {
        let mut sources = self.corpus.sources.clone();
        if let Some(s) = &self.synthetic {
            let have: BTreeSet<String> = sources.iter().map(|s| s.name.clone()).collect();
            for src in s.sources.iter().filter(|x| !have.contains(&x.name)) {
                sources.push(SourceSpec {
                    name: src.name.clone(),
                    path: self.output_root.join(SYNTH_DIR).join(format!("{}.txt", src.name)),
                    weight_tokens: src.tokens,
                });
            }
        }
        CorpusSpec {
            max_seq_len: self.corpus.max_seq_len,
            heldout_sequences: self.corpus.heldout_sequences,
            sources,
            stages: self.corpus.stages.clone(),
        }
    }
}

/// Parses a run configuration and runs every cross-field check.
///
/// Relative source paths resolve against `base_dir`. All violations are
/// collected into one [`Error::Config`].
pub fn validate_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        Error::Config(vec![ConfigIssue {
            keys: Vec::new(),
            message: e.message().to_string(),
        }])
    })?;
    let mut issues = Vec::new();
    let mut issue = |keys: &[&str], message: String| {
        issues.push(ConfigIssue {
            keys: keys.iter().map(|k| k.to_string()).collect(),
            message,
        })
    };

    if cfg.schema_version != RUN_CONFIG_SCHEMA_VERSION {
        issue(
            &["schema_version"],
            format!("expected {RUN_CONFIG_SCHEMA_VERSION}, found {}", cfg.schema_version),
        );
    }

    let m = &cfg.model;
    if m.vocab_size != VOCAB_SIZE {
        issue(
            &["model.vocab_size"],
            format!("the byte tokenizer has {VOCAB_SIZE} ids, model declares {}", m.vocab_size),
        );
    }
    if m.mup {
        issue(&["model.mup"], "maximal-update parameterization is not implemented".into());
    }
    if let Err(e) = m.validate() {
        issue(&["model"], e.to_string());
    }
    let c = &cfg.corpus;
    if c.max_seq_len < 2 {
        issue(&["corpus.max_seq_len"], "must be at least 2".into());
    } else if c.max_seq_len - 1 > m.max_seq_len {
        issue(
            &["corpus.max_seq_len", "model.max_seq_len"],
            format!(
                "{}-token windows need model.max_seq_len ≥ {}",
                c.max_seq_len,
                c.max_seq_len - 1
            ),
        );
    }
    if c.n_chunks == 0 {
        issue(&["corpus.n_chunks"], "must be positive".into());
    }
    if !c.stages.is_empty() && (c.n_chunks as usize) < c.stages.len() {
        issue(
            &["corpus.n_chunks", "corpus.stages"],
            format!("{} stages cannot share {} chunks", c.stages.len(), c.n_chunks),
        );
    }

    if let Some(s) = &cfg.synthetic {
        if let Err(e) = s.validate() {
            issue(&["synthetic.sources"], e.to_string());
        }
    }
    let spec = cfg.corpus_spec();
    if spec.sources.is_empty() {
        issue(&["corpus.sources"], "no sources and no [synthetic] section".into());
    }
    let generated: BTreeSet<&str> = cfg
        .synthetic
        .iter()
        .flat_map(|s| s.sources.iter().map(|x| x.name.as_str()))
        .collect();
    let mut names = BTreeSet::new();
    let mut available = BTreeMap::new();
    for s in &spec.sources {
        let key = format!("corpus.sources.{}", s.name);
        if !names.insert(s.name.clone()) {
            issue(&[&key], "duplicate source name".into());
        }
        if s.weight_tokens == 0 {
            issue(&[&format!("{key}.weight_tokens")], "must be positive".into());
        }
        if generated.contains(s.name.as_str()) && !cfg.corpus.sources.iter().any(|x| x.name == s.name) {
            available.insert(s.name.clone(), s.weight_tokens);
            continue;
        }
        let path = if s.path.is_absolute() {
            s.path.clone()
        } else {
            base_dir.join(&s.path)
        };
        match fs::read(&path) {
            Ok(bytes) => {
                let tokens = bytes.iter().filter(|&&b| b != b'\n').count() as u64;
                available.insert(s.name.clone(), tokens);
                if s.weight_tokens > tokens {
                    issue(
                        &[&format!("{key}.weight_tokens")],
                        format!("requests {} tokens, `{}` holds {tokens}", s.weight_tokens, path.display()),
                    );
                }
            }
            Err(e) => issue(&[&format!("{key}.path")], format!("{}: {e}", path.display())),
        }
    }
    for (i, stage) in spec.stages.iter().enumerate() {
        for (name, budget) in stage {
            let key = format!("corpus.stages[{i}].{name}");
            match available.get(name) {
                None => issue(&[&key], format!("unknown source `{name}`")),
                Some(&have) if *budget > have => issue(
                    &[&key, &format!("corpus.sources.{name}")],
                    format!("stage budget {budget} exceeds the {have} tokens of source `{name}`"),
                ),
                _ => {}
            }
        }
    }
    if !spec.stages.is_empty() {
        for s in &spec.sources {
            let staged: u64 = spec.stages.iter().filter_map(|b| b.get(&s.name)).sum();
            if staged != s.weight_tokens {
                issue(
                    &["corpus.stages", &format!("corpus.sources.{}.weight_tokens", s.name)],
                    format!("stage budgets sum to {staged}, weight_tokens is {}", s.weight_tokens),
                );
            }
        }
    }

    let t = &cfg.train;
    if !(t.final_lr > 0.0 && t.final_lr <= t.peak_lr) {
        issue(&["train.final_lr", "train.peak_lr"], "need 0 < final_lr ≤ peak_lr".into());
    }
    if !(t.clip_norm > 0.0) {
        issue(&["train.clip_norm"], "must be positive".into());
    }
    if t.batch_size_sequences == 0 {
        issue(&["train.batch_size_sequences"], "must be positive".into());
    } else {
        let total = t.total_steps.unwrap_or_else(|| estimate_steps(&spec, t.batch_size_sequences));
        if t.warmup_steps >= total {
            let which = if t.total_steps.is_some() {
                "total_steps"
            } else {
                "total_steps (derived from the corpus size)"
            };
            issue(
                &["train.warmup_steps", "train.total_steps"],
                format!("warmup_steps {} must be below {which} {total}", t.warmup_steps),
            );
        }
    }
    for (key, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
        if !(0.0..1.0).contains(&b) {
            issue(&[key], format!("must lie in [0, 1), got {b}"));
        }
    }

    let a = &cfg.analysis;
    if a.k == 0 || a.l == 0 {
        issue(&["analysis.k", "analysis.l"], "must be positive".into());
    }
    if a.k + a.l > c.max_seq_len {
        issue(
            &["analysis.k", "analysis.l", "corpus.max_seq_len"],
            format!("probes of {} tokens exceed {}-token sequences", a.k + a.l, c.max_seq_len),
        );
    }
    if a.n_probes == 0 {
        issue(&["analysis.n_probes"], "must be positive".into());
    }
    if let Err(e) = a.checkpoints.parse::<CheckpointSelection>() {
        issue(&["analysis.checkpoints"], e.to_string());
    }

    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(issues))
    }
}

/// Lower bound on optimizer steps: separators and padding only add sequences.
fn estimate_steps(spec: &CorpusSpec, batch: usize) -> u64 {
    let tokens: u64 = spec.sources.iter().map(|s| s.weight_tokens).sum();
    let sequences = (tokens / spec.max_seq_len.max(1) as u64).saturating_sub(spec.heldout_sequences as u64);
    sequences / batch as u64
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    validate_config(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Model and optimizer settings for `train --plan`; other sections of a
/// full run configuration are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    #[serde(default = "ModelConfig::toy")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainPlan,
}

pub fn load_plan(path: &Path) -> Result<PlanFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let plan: PlanFile = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    plan.model.validate()?;
    Ok(plan)
}
