//! Seeded synthetic text sources for desk-scale experiments.
//!
//! Every source draws bytes from the 255 values other than `\n`, so each
//! line is one document and the byte marginal is close to uniform.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SourceSpec;
use crate::error::{Error, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::rng::Rng;

const ALPHABET: usize = 255;

fn symbol_to_byte(s: usize) -> u8 {
    let b = s as u8;
    if b >= b'\n' {
        b + 1
    } else {
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    /// Independent uniform bytes.
    Uniform,
    /// First-order chain following one fixed random permutation of the
    /// alphabet; with probability `noise` a uniform byte is emitted instead.
    Markov { noise: f64 },
    /// Blocks of `run` bytes: a uniform byte followed by `run - 1` steps of
    /// one fixed random permutation. Block boundaries sit at fixed offsets
    /// within a document, so only the first byte of each block is uncertain.
    Blocks { run: usize },
    /// Each byte is the image of the previous one under one of `choices`
    /// fixed random permutations, picked uniformly.
    Branch { choices: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSource {
    pub name: String,
    #[serde(flatten)]
    pub kind: SynthKind,
    /// Bytes to generate, separators excluded.
    pub tokens: u64,
    /// Inclusive document length range in bytes.
    pub doc_len: [usize; 2],
    /// Times each generated document is repeated; the copies count toward
    /// `tokens` and the last one may be cut short.
    #[serde(default = "one")]
    pub copies: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub sources: Vec<SynthSource>,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.sources {
            let [lo, hi] = s.doc_len;
            if lo == 0 || lo > hi {
                return Err(Error::Invalid(format!("source `{}`: bad doc_len [{lo}, {hi}]", s.name)));
            }
            if s.tokens == 0 {
                return Err(Error::Invalid(format!("source `{}`: tokens must be positive", s.name)));
            }
            match s.kind {
                SynthKind::Markov { noise } if !(0.0..=1.0).contains(&noise) => {
                    return Err(Error::Invalid(format!("source `{}`: noise must lie in [0, 1]", s.name)));
                }
                SynthKind::Blocks { run: 0 } => {
                    return Err(Error::Invalid(format!("source `{}`: run must be positive", s.name)));
                }
                _ if s.copies == 0 => {
                    return Err(Error::Invalid(format!("source `{}`: copies must be positive", s.name)));
                }
                SynthKind::Branch { choices } if choices == 0 || choices > ALPHABET => {
                    return Err(Error::Invalid(format!(
                        "source `{}`: choices must lie in 1..={ALPHABET}",
                        s.name
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Generates the documents of one source, newline-terminated.
pub fn generate_source(source: &SynthSource, seed: u64) -> Vec<u8> {
    let mut rng = Rng::derive(seed, &format!("synth/{}", source.name));
    let mut next: Vec<usize> = (0..ALPHABET).collect();
    rng.shuffle(&mut next);
    let branches: Vec<Vec<usize>> = match source.kind {
        SynthKind::Branch { choices } => (0..choices)
            .map(|_| {
                let mut p: Vec<usize> = (0..ALPHABET).collect();
                rng.shuffle(&mut p);
                p
            })
            .collect(),
        _ => Vec::new(),
    };
    let [lo, hi] = source.doc_len;
    let mut out = Vec::with_capacity(source.tokens as usize + source.tokens as usize / lo + 1);
    let mut left = source.tokens as usize;
    while left > 0 {
        let len = (lo + rng.below((hi - lo + 1) as u64) as usize).min(left);
        let mut s = rng.below(ALPHABET as u64) as usize;
        let mut doc = Vec::with_capacity(len);
        for i in 0..len {
            doc.push(symbol_to_byte(s));
            s = match source.kind {
                SynthKind::Blocks { run } if (i + 1) % run != 0 => next[s],
                SynthKind::Uniform | SynthKind::Blocks { .. } => rng.below(ALPHABET as u64) as usize,
                SynthKind::Branch { .. } => branches[rng.below(branches.len() as u64) as usize][s],
                SynthKind::Markov { noise } => {
                    if rng.next_f64() < noise {
                        rng.below(ALPHABET as u64) as usize
                    } else {
                        next[s]
                    }
                }
            };
        }
        for _ in 0..source.copies {
            if left == 0 {
                break;
            }
            let take = doc.len().min(left);
            out.extend_from_slice(&doc[..take]);
            out.push(b'\n');
            left -= take;
        }
    }
    out
}

/// Writes `<name>.txt` for every source into `dir` and returns matching
/// corpus source entries.
pub fn generate_corpus(spec: &SynthSpec, dir: &Path) -> Result<Vec<SourceSpec>> {
    spec.validate()?;
    create_dir(dir)?;
    let mut out = Vec::new();
    for s in &spec.sources {
        let path: PathBuf = dir.join(format!("{}.txt", s.name));
        write_atomic(&path, &generate_source(s, spec.seed))?;
        out.push(SourceSpec {
            name: s.name.clone(),
            path,
            weight_tokens: s.tokens,
        });
    }
    Ok(out)
}

/// TOML `[[sources]]` entries for generated files, paths relative to `dir`.
pub fn sources_toml(sources: &[SourceSpec], dir: &Path) -> String {
    let mut s = String::new();
    for src in sources {
        let rel = src.path.strip_prefix(dir).unwrap_or(&src.path);
        let _ = write!(
            s,
            "[[sources]]\nname = \"{}\"\npath = \"{}\"\nweight_tokens = {}\n\n",
            src.name,
            rel.display(),
            src.weight_tokens
        );
    }
    s
}
