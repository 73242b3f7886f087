//! Corpus preparation: ingest sources, pack, globally permute, partition into
//! evenly sized chunks and write a checksummed provenance manifest.
//!
//! Source files hold one document per line (`\n`-separated, empty lines
//! skipped). Each source contributes exactly its token budget, drawn from
//! the front of the file; a stage plan can split a source's budget across
//! several stages, each stage consuming the next slice of that source.

pub mod chunk_file;
pub mod manifest;
pub mod pack;
pub mod stage;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use chunk_file::ChunkData;
pub use manifest::{
    verify_manifest, CheckEntry, CheckStatus, ChunkEntry, CorpusManifest, FileEntry,
    VerificationReport, MANIFEST_FILE,
};
pub use pack::{pack_sequences, Document, Origin, SequenceRecord};
pub use stage::{build_stage_plan, SourceBudget, Stage, StagePlan};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::rng::{permute_with, Rng};
use crate::tokenizer::{tokenize, PAD_ID, TOKENIZER_ID, VOCAB_SIZE};

pub const ORIGINS_FILE: &str = "origins.csv";
pub const HELDOUT_FILE: &str = "heldout.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub path: PathBuf,
    /// Absolute number of tokens drawn from this source.
    pub weight_tokens: u64,
}

/// Contents of a `--sources` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Sequences held back from training for perplexity evaluation.
    #[serde(default)]
    pub heldout_sequences: usize,
    pub sources: Vec<SourceSpec>,
    /// Optional curriculum; each entry maps source name to tokens.
    #[serde(default)]
    pub stages: Vec<BTreeMap<String, u64>>,
}

fn default_max_seq_len() -> usize {
    64
}

impl CorpusSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_seq_len < 2 {
            return Err(Error::Invalid("max_seq_len must be at least 2".into()));
        }
        if self.max_seq_len > u32::MAX as usize {
            return Err(Error::Invalid("max_seq_len too large".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Invalid("no sources".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sources {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate source name `{}`", s.name)));
            }
            if s.weight_tokens == 0 {
                return Err(Error::Invalid(format!("source `{}` has zero weight_tokens", s.name)));
            }
        }
        Ok(())
    }

    /// Per-stage budgets, defaulting to one stage that takes every budget.
    pub fn stage_budgets(&self) -> Result<Vec<BTreeMap<String, u64>>> {
        if self.stages.is_empty() {
            return Ok(vec![self
                .sources
                .iter()
                .map(|s| (s.name.clone(), s.weight_tokens))
                .collect()]);
        }
        for s in &self.sources {
            let staged: u64 = self.stages.iter().filter_map(|b| b.get(&s.name)).sum();
            if staged != s.weight_tokens {
                return Err(Error::Invalid(format!(
                    "stage budgets for `{}` sum to {staged}, weight_tokens is {}",
                    s.name, s.weight_tokens
                )));
            }
        }
        Ok(self.stages.clone())
    }
}

/// Splits a source file into tokenized documents, one per non-empty line.
pub fn read_documents(path: &Path) -> Result<Vec<Vec<u16>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes
        .split(|&b| b == b'\n')
        .filter(|line| !line.is_empty())
        .map(tokenize)
        .collect())
}

/// Sequential token cursor over one source.
struct SourceCursor {
    name: String,
    docs: Vec<Vec<u16>>,
    doc: usize,
    offset: usize,
}

impl SourceCursor {
    fn available(&self) -> u64 {
        self.docs.iter().map(|d| d.len() as u64).sum()
    }

    fn take(&mut self, mut budget: u64) -> Vec<Document> {
        let mut out = Vec::new();
        while budget > 0 && self.doc < self.docs.len() {
            let d = &self.docs[self.doc];
            let rest = (d.len() - self.offset) as u64;
            let n = rest.min(budget) as usize;
            out.push(Document {
                origin: Origin {
                    source: self.name.clone(),
                    document: self.doc as u64,
                },
                tokens: d[self.offset..self.offset + n].to_vec(),
            });
            budget -= n as u64;
            self.offset += n;
            if self.offset == d.len() {
                self.doc += 1;
                self.offset = 0;
            }
        }
        out
    }
}

/// Block sizes for `n` records over `n_chunks` contiguous chunks, larger
/// blocks first.
pub fn chunk_sizes(n: usize, n_chunks: usize) -> Result<Vec<usize>> {
    if n_chunks == 0 {
        return Err(Error::Invalid("n_chunks must be at least 1".into()));
    }
    if n_chunks > n {
        return Err(Error::Invalid(format!(
            "cannot fill {n_chunks} chunks with {n} sequences"
        )));
    }
    let base = n / n_chunks;
    let rem = n % n_chunks;
    Ok((0..n_chunks).map(|i| base + usize::from(i < rem)).collect())
}

/// Cuts a permuted record stream into contiguous, evenly sized chunks.
pub fn partition_chunks(
    records: Vec<SequenceRecord>,
    n_chunks: usize,
) -> Result<Vec<Vec<SequenceRecord>>> {
    let sizes = chunk_sizes(records.len(), n_chunks)?;
    let mut iter = records.into_iter();
    Ok(sizes
        .into_iter()
        .map(|s| iter.by_ref().take(s).collect())
        .collect())
}

fn write_records(records: &[SequenceRecord], seq_len: usize, path: &Path) -> Result<(Vec<u8>, u64)> {
    let mut data = ChunkData::new(seq_len);
    let mut pads = 0u64;
    for r in records {
        data.push(&r.tokens);
        pads += r.tokens.iter().filter(|&&t| t == PAD_ID).count() as u64;
    }
    let bytes = data.to_bytes();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok((bytes, pads))
}

fn entry_for(index: u32, file: &str, records: &[SequenceRecord], bytes: &[u8], pads: u64, seq_len: usize) -> ChunkEntry {
    let total = (records.len() * seq_len) as u64;
    ChunkEntry {
        index,
        file: file.to_string(),
        sequences: records.len() as u64,
        tokens: total - pads,
        pad_tokens: pads,
        sha256: sha256_hex(bytes),
    }
}

pub fn chunk_file_name(index: u32) -> String {
    format!("chunk_{index:05}.bin")
}

/// Runs the whole preparation pass and writes chunk files, the held-out
/// file, `origins.csv` and `manifest.json` into `out_dir`. Relative source
/// paths resolve against `base_dir`.
pub fn prepare_corpus(
    spec: &CorpusSpec,
    base_dir: &Path,
    seed: u64,
    n_chunks: u32,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cursors = Vec::with_capacity(spec.sources.len());
    for s in &spec.sources {
        let path = if s.path.is_absolute() {
            s.path.clone()
        } else {
            base_dir.join(&s.path)
        };
        cursors.push(SourceCursor {
            name: s.name.clone(),
            docs: read_documents(&path)?,
            doc: 0,
            offset: 0,
        });
    }
    let available: Vec<(String, u64)> =
        cursors.iter().map(|c| (c.name.clone(), c.available())).collect();
    let plan = build_stage_plan(&spec.stage_budgets()?, &available, n_chunks)?;

    let seq_len = spec.max_seq_len;
    let mut rng = Rng::seed_from_u64(seed);
    let mut chunks = Vec::with_capacity(n_chunks as usize);
    let mut heldout = None;
    let mut origins = String::from("global_index,chunk,position,source,document,padding\n");
    let mut global = 0u64;

    for (si, stage) in plan.stages.iter().enumerate() {
        let mut docs = Vec::new();
        for b in &stage.budgets {
            let cursor = cursors.iter_mut().find(|c| c.name == b.source).unwrap();
            docs.extend(cursor.take(b.tokens));
        }
        let packed = pack_sequences(docs, seq_len);
        let perm = permute_with(&mut rng, packed.len());
        let mut slots: Vec<Option<SequenceRecord>> = packed.into_iter().map(Some).collect();
        let mut permuted: Vec<SequenceRecord> = perm
            .iter()
            .map(|&i| slots[i].take().expect("permutation is a bijection"))
            .collect();
        for r in permuted.iter_mut() {
            r.global_index = global;
            global += 1;
        }

        let is_last = si + 1 == plan.stages.len();
        let held = if is_last && spec.heldout_sequences > 0 {
            if spec.heldout_sequences >= permuted.len() {
                return Err(Error::Invalid(format!(
                    "heldout_sequences {} leaves no training data",
                    spec.heldout_sequences
                )));
            }
            permuted.split_off(permuted.len() - spec.heldout_sequences)
        } else {
            Vec::new()
        };

        let blocks = partition_chunks(permuted, stage.n_chunks() as usize)?;
        for (offset, block) in blocks.into_iter().enumerate() {
            let index = stage.chunk_start + offset as u32;
            let file = chunk_file_name(index);
            let (bytes, pads) = write_records(&block, seq_len, &out_dir.join(&file))?;
            for (pos, r) in block.iter().enumerate() {
                let _ = writeln!(
                    origins,
                    "{},{index},{pos},{},{},{}",
                    r.global_index, r.origin.source, r.origin.document, r.padding
                );
            }
            chunks.push(entry_for(index, &file, &block, &bytes, pads, seq_len));
        }

        if !held.is_empty() {
            let (bytes, pads) = write_records(&held, seq_len, &out_dir.join(HELDOUT_FILE))?;
            for (pos, r) in held.iter().enumerate() {
                let _ = writeln!(
                    origins,
                    "{},heldout,{pos},{},{},{}",
                    r.global_index, r.origin.source, r.origin.document, r.padding
                );
            }
            heldout = Some(entry_for(u32::MAX, HELDOUT_FILE, &held, &bytes, pads, seq_len));
        }
    }

    let origins_path = out_dir.join(ORIGINS_FILE);
    fs::write(&origins_path, origins.as_bytes()).map_err(|e| Error::io(&origins_path, e))?;

    let total_tokens = chunks.iter().map(|c| c.tokens).sum();
    let manifest = CorpusManifest {
        schema_version: manifest::MANIFEST_SCHEMA_VERSION,
        tokenizer_id: TOKENIZER_ID.to_string(),
        vocab_size: VOCAB_SIZE,
        max_seq_len: seq_len,
        seed,
        n_chunks,
        sources: spec.sources.clone(),
        stages: plan,
        chunks,
        heldout,
        origins: FileEntry {
            file: ORIGINS_FILE.to_string(),
            sha256: sha256_hex(origins.as_bytes()),
        },
        total_tokens,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: u64) -> SequenceRecord {
        SequenceRecord {
            tokens: vec![i as u16, 0],
            origin: Origin {
                source: "s".into(),
                document: i,
            },
            global_index: i,
            padding: 0,
        }
    }

    #[test]
    fn sizes_ten_over_three() {
        assert_eq!(chunk_sizes(10, 3).unwrap(), vec![4, 3, 3]);
        assert_eq!(chunk_sizes(5, 5).unwrap(), vec![1; 5]);
        assert!(chunk_sizes(2, 3).is_err());
        assert!(chunk_sizes(2, 0).is_err());
    }

    #[test]
    fn partition_is_contiguous() {
        let parts = partition_chunks((0..10).map(rec).collect(), 3).unwrap();
        let idx: Vec<Vec<u64>> = parts
            .iter()
            .map(|p| p.iter().map(|r| r.global_index).collect())
            .collect();
        assert_eq!(idx, vec![vec![0, 1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]]);
    }

    #[test]
    fn cursor_splits_documents_across_stages() {
        let mut c = SourceCursor {
            name: "s".into(),
            docs: vec![vec![1, 2, 3], vec![4, 5]],
            doc: 0,
            offset: 0,
        };
        let a = c.take(2);
        let b = c.take(3);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].tokens, vec![1, 2]);
        assert_eq!(b.iter().map(|d| d.tokens.clone()).collect::<Vec<_>>(), vec![vec![3], vec![4, 5]]);
        assert_eq!(b[0].origin.document, 0);
    }

    #[test]
    fn staged_budgets_must_match_weights() {
        let spec = CorpusSpec {
            max_seq_len: 8,
            heldout_sequences: 0,
            sources: vec![SourceSpec {
                name: "a".into(),
                path: "a.txt".into(),
                weight_tokens: 10,
            }],
            stages: vec![[("a".to_string(), 4)].into_iter().collect()],
        };
        assert!(spec.stage_budgets().is_err());
    }
}
