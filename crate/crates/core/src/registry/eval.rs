//! Held-out perplexity with a train/held-out leakage guard.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::corpus::{ChunkData, CorpusManifest};
use crate::error::{Error, Result};
use crate::model::{batch_loss, ModelConfig, ParameterSet};
use crate::tokenizer::PAD_ID;

const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: u32,
    pub step: u64,
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: u64,
    pub warnings: Vec<String>,
}

/// Mean next-token NLL over the non-pad targets of `data` and their count.
pub fn mean_nll(params: &ParameterSet, cfg: &ModelConfig, data: &ChunkData) -> Result<(f64, u64)> {
    let rows: Vec<&[u16]> = data
        .sequences()
        .filter(|s| s[1..].iter().any(|&t| t != PAD_ID))
        .collect();
    let mut total = 0.0;
    let mut count = 0u64;
    for batch in rows.chunks(EVAL_BATCH) {
        let (mean, n) = batch_loss(params, cfg, batch)?;
        total += mean * n as f64;
        count += n as u64;
    }
    if count == 0 {
        return Err(Error::Invalid("held-out data has no scorable tokens".into()));
    }
    Ok((total / count as f64, count))
}

/// Counts held-out sequences that also occur verbatim in a training chunk.
pub fn count_overlap(heldout: &ChunkData, manifest: &CorpusManifest, data_dir: &Path) -> Result<usize> {
    let held: HashSet<&[u16]> = heldout.sequences().collect();
    let mut shared = HashSet::new();
    for c in &manifest.chunks {
        let chunk = manifest.load_chunk(data_dir, c.index)?;
        for s in chunk.sequences() {
            if let Some(&h) = held.get(s) {
                shared.insert(h.to_vec());
            }
        }
    }
    Ok(shared.len())
}

/// Perplexity of `ckpt` on `heldout`, refusing data that leaks from training.
pub fn eval_perplexity(
    ckpt: &Checkpoint,
    heldout: &ChunkData,
    manifest: &CorpusManifest,
    data_dir: &Path,
) -> Result<EvalReport> {
    let expected = manifest.checksum();
    if ckpt.manifest_checksum != expected {
        return Err(Error::ManifestMismatch {
            expected,
            found: ckpt.manifest_checksum.clone(),
        });
    }
    let shared = count_overlap(heldout, manifest, data_dir)?;
    if shared > 0 {
        return Err(Error::Leakage(shared));
    }
    let (nll, tokens) = mean_nll(&ckpt.params, &ckpt.model, heldout)?;
    Ok(EvalReport {
        checkpoint: ckpt.index,
        step: ckpt.step,
        perplexity: nll.exp(),
        mean_nll: nll,
        tokens,
        warnings: ckpt.precision_warning().into_iter().collect(),
    })
}
