//! Seeded probe sampling from the manifest's chunks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{PAD_ID, SEPARATOR_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub chunk: u32,
    /// Sequence position within the chunk file.
    pub sequence: u32,
    /// The first `k + l` tokens of the sequence.
    pub tokens: Vec<u16>,
    /// The window spans a document separator.
    pub crosses_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub k: usize,
    pub l: usize,
    pub n_per_chunk: usize,
    pub seed: u64,
    /// Grouped by chunk, sequence ids ascending within a chunk.
    pub probes: Vec<Probe>,
    pub warnings: Vec<String>,
}

impl ProbeSet {
    pub fn chunks(&self) -> impl Iterator<Item = u32> + '_ {
        let mut last = None;
        self.probes.iter().filter_map(move |p| {
            let fresh = last != Some(p.chunk);
            last = Some(p.chunk);
            fresh.then_some(p.chunk)
        })
    }
}

/// Draws up to `n` probes per chunk without replacement.
///
/// Sequences whose first `k + l` tokens contain padding are ineligible. When
/// a chunk has fewer than `n` eligible sequences all of them are taken and a
/// warning is recorded.
pub fn sample_probes(
    manifest: &CorpusManifest,
    data_dir: &Path,
    n: usize,
    k: usize,
    l: usize,
    seed: u64,
) -> Result<ProbeSet> {
    if k == 0 || l == 0 {
        return Err(Error::Invalid("k and l must be positive".into()));
    }
    if k + l > manifest.max_seq_len {
        return Err(Error::Invalid(format!(
            "probe length {} exceeds sequence length {}",
            k + l,
            manifest.max_seq_len
        )));
    }
    let mut probes = Vec::new();
    let mut warnings = Vec::new();
    for entry in &manifest.chunks {
        let data = manifest.load_chunk(data_dir, entry.index)?;
        let eligible: Vec<usize> = (0..data.len())
            .filter(|&i| !data.sequence(i)[..k + l].contains(&PAD_ID))
            .collect();
        let mut chosen = if eligible.len() <= n {
            if eligible.len() < n {
                warnings.push(format!(
                    "chunk {} has {} eligible sequences, fewer than {n}; taking all",
                    entry.index,
                    eligible.len()
                ));
            }
            eligible
        } else {
            let mut rng = Rng::derive(seed, &format!("probes/{}", entry.index));
            let mut pool = eligible;
            // partial Fisher–Yates: the first n slots become the sample
            for i in 0..n {
                let j = i + rng.below((pool.len() - i) as u64) as usize;
                pool.swap(i, j);
            }
            pool.truncate(n);
            pool
        };
        chosen.sort_unstable();
        for i in chosen {
            let tokens = data.sequence(i)[..k + l].to_vec();
            probes.push(Probe {
                chunk: entry.index,
                sequence: i as u32,
                crosses_boundary: tokens.contains(&SEPARATOR_ID),
                tokens,
            });
        }
    }
    Ok(ProbeSet {
        k,
        l,
        n_per_chunk: n,
        seed,
        probes,
        warnings,
    })
}
