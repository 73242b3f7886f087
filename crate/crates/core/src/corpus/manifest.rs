//! Provenance manifest and its verification.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::chunk_file::{parse_header, ChunkData};
use super::stage::StagePlan;
use super::SourceSpec;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Bookkeeping for one data file referenced by the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub index: u32,
    pub file: String,
    pub sequences: u64,
    /// Non-pad tokens (document tokens plus separators).
    pub tokens: u64,
    pub pad_tokens: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

/// Field order here is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub tokenizer_id: String,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub n_chunks: u32,
    pub sources: Vec<SourceSpec>,
    pub stages: StagePlan,
    pub chunks: Vec<ChunkEntry>,
    pub heldout: Option<ChunkEntry>,
    pub origins: FileEntry,
    pub total_tokens: u64,
}

impl CorpusManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest schema version {}",
                manifest.schema_version
            )));
        }
        Ok(manifest)
    }

    /// Hash of the canonical JSON; this is what checkpoints record.
    pub fn checksum(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn chunk_path(&self, dir: &Path, index: u32) -> PathBuf {
        dir.join(&self.chunks[index as usize].file)
    }

    pub fn total_sequences(&self) -> u64 {
        self.chunks.iter().map(|c| c.sequences).sum()
    }

    pub fn load_chunk(&self, dir: &Path, index: u32) -> Result<ChunkData> {
        let entry = self
            .chunks
            .get(index as usize)
            .ok_or_else(|| Error::Invalid(format!("no chunk {index} in manifest")))?;
        let data = ChunkData::read(&dir.join(&entry.file))?;
        if data.seq_len != self.max_seq_len || data.len() as u64 != entry.sequences {
            return Err(Error::Format(format!("chunk {index} disagrees with manifest")));
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum CheckStatus {
    Pass,
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckEntry {
    /// Chunk index, or `None` for the held-out and origin files.
    pub chunk: Option<u32>,
    pub file: String,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerificationReport {
    pub entries: Vec<CheckEntry>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.status == CheckStatus::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| e.status != CheckStatus::Pass)
    }
}

fn check_chunk(entry: &ChunkEntry, max_seq_len: usize, dir: &Path) -> CheckStatus {
    let path = dir.join(&entry.file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return CheckStatus::Fail("missing file".into())
        }
        Err(e) => return CheckStatus::Fail(format!("unreadable: {e}")),
    };
    let expected_len = 12 + entry.sequences as usize * max_seq_len * 2;
    if bytes.len() != expected_len {
        return CheckStatus::Fail(format!(
            "length mismatch: expected {expected_len} bytes, found {}",
            bytes.len()
        ));
    }
    match parse_header(&bytes) {
        Ok(h) if h.sequences as u64 == entry.sequences && h.seq_len == max_seq_len => {}
        Ok(_) => return CheckStatus::Fail("header mismatch".into()),
        Err(e) => return CheckStatus::Fail(e.to_string()),
    }
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return CheckStatus::Fail(format!("checksum mismatch: {digest}"));
    }
    let data = ChunkData::from_bytes(&bytes).expect("validated above");
    let pads = data
        .tokens
        .iter()
        .filter(|&&t| t == crate::tokenizer::PAD_ID)
        .count() as u64;
    if pads != entry.pad_tokens || data.tokens.len() as u64 - pads != entry.tokens {
        return CheckStatus::Fail("token count mismatch".into());
    }
    CheckStatus::Pass
}

/// Recomputes every checksum and count. Problems become failed entries.
pub fn verify_manifest(manifest: &CorpusManifest, dir: &Path) -> VerificationReport {
    let mut entries: Vec<CheckEntry> = manifest
        .chunks
        .iter()
        .map(|c| CheckEntry {
            chunk: Some(c.index),
            file: c.file.clone(),
            status: check_chunk(c, manifest.max_seq_len, dir),
        })
        .collect();

    let sum: u64 = manifest.chunks.iter().map(|c| c.tokens).sum();
    if sum != manifest.total_tokens {
        entries.push(CheckEntry {
            chunk: None,
            file: MANIFEST_FILE.into(),
            status: CheckStatus::Fail(format!(
                "total_tokens {} != chunk sum {sum}",
                manifest.total_tokens
            )),
        });
    }
    if let Some(h) = &manifest.heldout {
        entries.push(CheckEntry {
            chunk: None,
            file: h.file.clone(),
            status: check_chunk(h, manifest.max_seq_len, dir),
        });
    }
    let origin_status = match fs::read(dir.join(&manifest.origins.file)) {
        Ok(bytes) if sha256_hex(&bytes) == manifest.origins.sha256 => CheckStatus::Pass,
        Ok(_) => CheckStatus::Fail("checksum mismatch".into()),
        Err(_) => CheckStatus::Fail("missing file".into()),
    };
    entries.push(CheckEntry {
        chunk: None,
        file: manifest.origins.file.clone(),
        status: origin_status,
    });
    VerificationReport { entries }
}
