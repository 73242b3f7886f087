//! Memorization across checkpoints: scores, distributions, chunk-group
//! evolution and checkpoint-to-checkpoint correlation.

pub mod probes;
pub mod report;
pub mod score;

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use probes::{sample_probes, Probe, ProbeSet};
pub use report::{emit_report, REPORT_FILES};
pub use score::{match_count, memorization_score, pearson, phi};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::model::generate_greedy_batch;
use crate::registry::{list_checkpoints, load_weights, Checkpoint};

/// Which probes a checkpoint is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exposure {
    /// Only chunks the run had consumed by this checkpoint.
    Seen,
    /// Every probe; used for the untrained chance baseline.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationResult {
    pub checkpoint: u32,
    pub step: u64,
    /// Matching continuation tokens per probe, aligned with the probe set;
    /// `None` for chunks outside the checkpoint's exposure.
    pub matches: Vec<Option<u16>>,
    /// Consumed chunks whose training was abandoned.
    pub nan_skipped: Vec<u32>,
    /// Most recently trained chunk, if any.
    pub latest_chunk: Option<u32>,
    pub l: usize,
}

impl MemorizationResult {
    pub fn score(&self, i: usize) -> Option<f64> {
        self.matches[i].map(|m| f64::from(m) / self.l as f64)
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..self.matches.len()).filter_map(|i| self.score(i)).collect()
    }

    pub fn evaluated(&self) -> usize {
        self.matches.iter().flatten().count()
    }

    pub fn mean_score(&self) -> Option<f64> {
        score::mean(&self.scores())
    }

    /// Share of evaluated probes with score exactly 1.
    pub fn extractible_fraction(&self) -> Option<f64> {
        let n = self.evaluated();
        let full = self.matches.iter().flatten().filter(|&&m| m as usize == self.l).count();
        (n > 0).then(|| full as f64 / n as f64)
    }

    /// Standard error of the mean score.
    pub fn standard_error(&self) -> Option<f64> {
        let s = self.scores();
        let m = score::mean(&s)?;
        if s.len() < 2 {
            return None;
        }
        let var = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
        Some((var / s.len() as f64).sqrt())
    }

    /// Histogram of match counts `0..=l`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.l + 1];
        for &m in self.matches.iter().flatten() {
            h[m as usize] += 1;
        }
        h
    }
}

/// Chunks consumed by the run at this checkpoint and those among them that
/// were abandoned.
fn exposure_of(ckpt: &Checkpoint) -> (BTreeSet<u32>, Vec<u32>) {
    let p = &ckpt.progress;
    let consumed: BTreeSet<u32> = p.queue[..p.cursor.min(p.queue.len())].iter().copied().collect();
    let trained: BTreeSet<u32> = p.trained.iter().copied().collect();
    let skipped = consumed.difference(&trained).copied().collect();
    (consumed, skipped)
}

/// Greedily continues every in-scope probe prompt and scores it.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    probes: &ProbeSet,
    manifest_checksum: &str,
    exposure: Exposure,
) -> Result<MemorizationResult> {
    if ckpt.manifest_checksum != manifest_checksum {
        return Err(Error::ManifestMismatch {
            expected: manifest_checksum.to_string(),
            found: ckpt.manifest_checksum.clone(),
        });
    }
    let (consumed, nan_skipped) = exposure_of(ckpt);
    let in_scope: Vec<usize> = probes
        .probes
        .iter()
        .enumerate()
        .filter(|(_, p)| exposure == Exposure::All || consumed.contains(&p.chunk))
        .map(|(i, _)| i)
        .collect();
    let prompts: Vec<&[u16]> = in_scope.iter().map(|&i| &probes.probes[i].tokens[..probes.k]).collect();
    let generated = if prompts.is_empty() {
        Vec::new()
    } else {
        generate_greedy_batch(&ckpt.params, &ckpt.model, &prompts, probes.l)?
    };
    let mut matches = vec![None; probes.probes.len()];
    for (&i, g) in in_scope.iter().zip(&generated) {
        let m = match_count(&probes.probes[i].tokens, g, probes.k, probes.l)?;
        matches[i] = Some(m as u16);
    }
    Ok(MemorizationResult {
        checkpoint: ckpt.index,
        step: ckpt.step,
        matches,
        nan_skipped,
        latest_chunk: ckpt.progress.trained.last().copied(),
        l: probes.l,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointSelection {
    /// `n` checkpoints evenly spaced over the completed ones (excluding 0).
    Auto(usize),
    All,
    List(Vec<u32>),
}

impl FromStr for CheckpointSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(Self::All);
        }
        if let Some(n) = s.strip_prefix("auto") {
            let n = if n.is_empty() { 10 } else { n.parse().map_err(|_| bad_selection(s))? };
            return Ok(Self::Auto(n));
        }
        s.split(',')
            .map(|x| x.trim().parse::<u32>().map_err(|_| bad_selection(s)))
            .collect::<Result<Vec<_>>>()
            .map(Self::List)
    }
}

fn bad_selection(s: &str) -> Error {
    Error::Invalid(format!("checkpoint selection `{s}` is not `all`, `autoN` or a comma list"))
}

impl CheckpointSelection {
    /// Resolves against the available indices; the result is sorted.
    pub fn resolve(&self, available: &[u32]) -> Result<Vec<u32>> {
        let trained: Vec<u32> = available.iter().copied().filter(|&i| i > 0).collect();
        let out: Vec<u32> = match self {
            Self::All => trained,
            Self::Auto(n) => {
                let m = trained.len();
                if m == 0 || *n == 0 {
                    Vec::new()
                } else if *n >= m {
                    trained
                } else {
                    let picks: BTreeSet<u32> = (1..=*n).map(|i| trained[(i * m).div_ceil(*n) - 1]).collect();
                    picks.into_iter().collect()
                }
            }
            Self::List(list) => {
                let set: BTreeSet<u32> = list.iter().copied().filter(|&i| i > 0).collect();
                if let Some(missing) = set.iter().find(|i| !available.contains(i)) {
                    return Err(Error::Invalid(format!("checkpoint {missing} does not exist")));
                }
                set.into_iter().collect()
            }
        };
        Ok(out)
    }
}

/// One chunk group: chunk indices `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkGroup {
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub mean_score: Option<f64>,
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkGroupMatrix {
    pub checkpoints: Vec<u32>,
    pub groups: Vec<ChunkGroup>,
    /// `cells[row][group]`; unseen groups have no probes and no mean.
    pub cells: Vec<Vec<GroupCell>>,
    /// Group holding the latest chunk trained before each row's checkpoint.
    pub latest: Vec<Option<usize>>,
}

impl ChunkGroupMatrix {
    /// Rows where the latest group's mean exceeds the pooled mean of all
    /// earlier groups; rows without an earlier group are not counted.
    pub fn recency_rows(&self, results: &[MemorizationResult], probes: &ProbeSet) -> (usize, usize) {
        let (mut hits, mut rows) = (0, 0);
        for (r, res) in results.iter().enumerate() {
            let Some(g) = self.latest[r] else { continue };
            if g == 0 {
                continue;
            }
            let earlier_end = self.groups[g].start;
            let earlier: Vec<f64> = probes
                .probes
                .iter()
                .enumerate()
                .filter(|(_, p)| p.chunk < earlier_end)
                .filter_map(|(i, _)| res.score(i))
                .collect();
            let (Some(latest), Some(before)) = (self.cells[r][g].mean_score, score::mean(&earlier)) else {
                continue;
            };
            rows += 1;
            if latest > before {
                hits += 1;
            }
        }
        (hits, rows)
    }
}

/// Groups chunks at the given checkpoints' boundaries and averages the
/// per-probe scores of each (checkpoint, group) cell.
///
/// `results[i]` belongs to `boundaries[i]`, which is also the exclusive
/// chunk bound of group `i`; the last group extends to `n_chunks`.
pub fn chunk_group_matrix(
    results: &[MemorizationResult],
    probes: &ProbeSet,
    n_chunks: u32,
) -> Result<ChunkGroupMatrix> {
    if results.is_empty() {
        return Err(Error::Invalid("no checkpoint results to group".into()));
    }
    let bounds: Vec<u32> = results.iter().map(|r| r.checkpoint.min(n_chunks)).collect();
    if bounds.windows(2).any(|w| w[0] >= w[1]) || bounds[0] == 0 {
        return Err(Error::Invalid("group boundaries must be positive and increasing".into()));
    }
    let mut groups = Vec::new();
    let mut start = 0;
    for &b in &bounds {
        groups.push(ChunkGroup { start, end: b });
        start = b;
    }
    if start < n_chunks {
        groups.last_mut().expect("nonempty").end = n_chunks;
    }
    let group_of = |chunk: u32| groups.iter().position(|g| chunk >= g.start && chunk < g.end);
    let mut cells = Vec::with_capacity(results.len());
    let mut latest = Vec::with_capacity(results.len());
    for res in results {
        let mut sums = vec![(0.0, 0usize); groups.len()];
        for (i, p) in probes.probes.iter().enumerate() {
            if let (Some(s), Some(g)) = (res.score(i), group_of(p.chunk)) {
                sums[g].0 += s;
                sums[g].1 += 1;
            }
        }
        cells.push(
            sums.into_iter()
                .map(|(s, n)| GroupCell {
                    mean_score: (n > 0).then(|| s / n as f64),
                    probes: n,
                })
                .collect(),
        );
        latest.push(res.latest_chunk.and_then(group_of));
    }
    Ok(ChunkGroupMatrix {
        checkpoints: results.iter().map(|r| r.checkpoint).collect(),
        groups,
        cells,
        latest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson_score: Option<f64>,
    pub binary_agreement: Option<f64>,
    pub common_probes: usize,
}

fn correlate(a: &MemorizationResult, b: &MemorizationResult) -> Option<Correlation> {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (x, y) in a.matches.iter().zip(&b.matches) {
        if let (Some(x), Some(y)) = (x, y) {
            xs.push(*x);
            ys.push(*y);
        }
    }
    if xs.is_empty() {
        return None;
    }
    let l = a.l as f64;
    let fx: Vec<f64> = xs.iter().map(|&m| f64::from(m) / l).collect();
    let fy: Vec<f64> = ys.iter().map(|&m| f64::from(m) / l).collect();
    let bx: Vec<bool> = xs.iter().map(|&m| m as usize == a.l).collect();
    let by: Vec<bool> = ys.iter().map(|&m| m as usize == a.l).collect();
    Some(Correlation {
        pearson_score: pearson(&fx, &fy),
        binary_agreement: phi(&bx, &by),
        common_probes: xs.len(),
    })
}

fn same_probes(a: &MemorizationResult, b: &MemorizationResult) -> Result<()> {
    if a.matches.len() != b.matches.len() || a.l != b.l {
        return Err(Error::Invalid("results come from different probe sets".into()));
    }
    Ok(())
}

/// Pearson on scores and phi on extractible flags over commonly scored probes.
pub fn checkpoint_correlation(a: &MemorizationResult, b: &MemorizationResult) -> Result<Correlation> {
    same_probes(a, b)?;
    correlate(a, b).ok_or_else(|| {
        Error::Invalid(format!(
            "checkpoints {} and {} share no scored probes",
            a.checkpoint, b.checkpoint
        ))
    })
}

/// Symmetric checkpoint × checkpoint correlations; pairs without common
/// probes are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub checkpoints: Vec<u32>,
    pub cells: Vec<Vec<Option<Correlation>>>,
}

impl CorrelationMatrix {
    pub fn new(results: &[MemorizationResult]) -> Result<Self> {
        let n = results.len();
        let mut cells = vec![vec![None; n]; n];
        for i in 0..n {
            for j in i..n {
                same_probes(&results[i], &results[j])?;
                let c = correlate(&results[i], &results[j]);
                cells[i][j] = c;
                cells[j][i] = c;
            }
        }
        Ok(Self {
            checkpoints: results.iter().map(|r| r.checkpoint).collect(),
            cells,
        })
    }

    /// Pearson values of consecutive pairs.
    pub fn adjacent_pearson(&self) -> Vec<(u32, u32, Option<f64>)> {
        (1..self.checkpoints.len())
            .map(|i| {
                let c = self.cells[i - 1][i].and_then(|c| c.pearson_score);
                (self.checkpoints[i - 1], self.checkpoints[i], c)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizeOptions {
    pub n_probes: usize,
    pub k: usize,
    pub l: usize,
    pub seed: u64,
    pub checkpoints: CheckpointSelection,
}

impl Default for MemorizeOptions {
    fn default() -> Self {
        Self {
            n_probes: 1000,
            k: 32,
            l: 32,
            seed: 0,
            checkpoints: CheckpointSelection::Auto(10),
        }
    }
}

/// Everything the figures are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub manifest_checksum: String,
    pub probes: ProbeSet,
    /// Checkpoint 0 scored on every probe.
    pub baseline: Option<MemorizationResult>,
    pub results: Vec<MemorizationResult>,
    pub matrix: ChunkGroupMatrix,
    pub correlations: CorrelationMatrix,
    pub warnings: Vec<String>,
}

/// Samples probes and scores the selected checkpoints of a training run.
pub fn analyze_run(
    checkpoint_dir: &Path,
    manifest: &CorpusManifest,
    data_dir: &Path,
    opts: &MemorizeOptions,
) -> Result<MemorizationReport> {
    let checksum = manifest.checksum();
    let probes = sample_probes(manifest, data_dir, opts.n_probes, opts.k, opts.l, opts.seed)?;
    let available = list_checkpoints(checkpoint_dir)?;
    let indices: Vec<u32> = available.iter().map(|(i, _)| *i).collect();
    let selected = opts.checkpoints.resolve(&indices)?;
    if selected.is_empty() {
        return Err(Error::Invalid("no trained checkpoints to analyze".into()));
    }
    let path_of = |i: u32| &available.iter().find(|(j, _)| *j == i).expect("resolved index").1;
    let mut warnings = probes.warnings.clone();
    let baseline = match indices.first() {
        Some(0) => {
            let c = load_weights(path_of(0))?;
            warnings.extend(c.precision_warning());
            Some(evaluate_checkpoint(&c, &probes, &checksum, Exposure::All)?)
        }
        _ => None,
    };
    let mut results = Vec::with_capacity(selected.len());
    for &i in &selected {
        let c = load_weights(path_of(i))?;
        warnings.extend(c.precision_warning());
        results.push(evaluate_checkpoint(&c, &probes, &checksum, Exposure::Seen)?);
    }
    let matrix = chunk_group_matrix(&results, &probes, manifest.n_chunks)?;
    let correlations = CorrelationMatrix::new(&results)?;
    Ok(MemorizationReport {
        manifest_checksum: checksum,
        probes,
        baseline,
        results,
        matrix,
        correlations,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_parsing() {
        assert_eq!("all".parse::<CheckpointSelection>().unwrap(), CheckpointSelection::All);
        assert_eq!("auto10".parse::<CheckpointSelection>().unwrap(), CheckpointSelection::Auto(10));
        assert_eq!(
            "3, 1,2".parse::<CheckpointSelection>().unwrap(),
            CheckpointSelection::List(vec![3, 1, 2])
        );
        assert!("autox".parse::<CheckpointSelection>().is_err());
    }

    #[test]
    fn auto_spacing() {
        let avail: Vec<u32> = (0..=20).collect();
        let picks = CheckpointSelection::Auto(10).resolve(&avail).unwrap();
        assert_eq!(picks, vec![2, 4, 6, 8, 10, 12, 14, 16, 18, 20]);
        let picks = CheckpointSelection::Auto(3).resolve(&avail).unwrap();
        assert_eq!(picks, vec![7, 14, 20]);
        assert_eq!(CheckpointSelection::Auto(50).resolve(&avail).unwrap().len(), 20);
        assert!(CheckpointSelection::List(vec![21]).resolve(&avail).is_err());
    }
}
