//! Figure-ready CSV tables and a JSON summary.
//!
//! | file | columns |
//! |---|---|
//! | `probe_scores.csv` | checkpoint, baseline, chunk, sequence, crosses_boundary, nan_skipped, matches, score |
//! | `fig6_score_histogram.csv` | checkpoint, matches, score, count |
//! | `fig6_summary.csv` | checkpoint, step, probes, mean_score, standard_error, extractible_fraction, pct_score_1 |
//! | `fig7_chunk_groups.csv` | checkpoint, group, chunk_start, chunk_end, probes, mean_score, latest_seen |
//! | `fig8_correlations.csv` | checkpoint_a, checkpoint_b, common_probes, pearson_score, binary_agreement |
//! | `summary.json` | aggregate figures and warnings |

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{MemorizationReport, MemorizationResult};
use crate::error::{Error, Result};
use crate::fsutil::{create_dir, write_atomic};

pub const REPORT_FILES: [&str; 6] = [
    "probe_scores.csv",
    "fig6_score_histogram.csv",
    "fig6_summary.csv",
    "fig7_chunk_groups.csv",
    "fig8_correlations.csv",
    "summary.json",
];

fn num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(csv_err)?;
        Ok(Self { w })
    }

    fn row(&mut self, fields: Vec<String>) -> Result<()> {
        self.w.write_record(&fields).map_err(csv_err)
    }

    fn save(self, path: &Path) -> Result<()> {
        let bytes = self.w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Serialize)]
struct CheckpointSummary {
    checkpoint: u32,
    step: u64,
    probes: usize,
    mean_score: Option<f64>,
    standard_error: Option<f64>,
    extractible_fraction: Option<f64>,
}

impl CheckpointSummary {
    fn of(r: &MemorizationResult) -> Self {
        Self {
            checkpoint: r.checkpoint,
            step: r.step,
            probes: r.evaluated(),
            mean_score: r.mean_score(),
            standard_error: r.standard_error(),
            extractible_fraction: r.extractible_fraction(),
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    manifest_checksum: &'a str,
    k: usize,
    l: usize,
    probes_per_chunk: usize,
    probe_seed: u64,
    total_probes: usize,
    boundary_crossing_probes: usize,
    baseline: Option<CheckpointSummary>,
    checkpoints: Vec<CheckpointSummary>,
    recency_rows: usize,
    recency_hits: usize,
    adjacent_pearson: Vec<(u32, u32, Option<f64>)>,
    correlation_metrics: [&'a str; 2],
    warnings: &'a [String],
    files: [&'a str; 6],
}

/// Writes every table under `out_dir` and returns the paths written.
pub fn emit_report(report: &MemorizationReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let probes = &report.probes;
    let all: Vec<(&MemorizationResult, bool)> = report
        .baseline
        .iter()
        .map(|b| (b, true))
        .chain(report.results.iter().map(|r| (r, false)))
        .collect();

    let mut t = Table::new(&[
        "checkpoint",
        "baseline",
        "chunk",
        "sequence",
        "crosses_boundary",
        "nan_skipped",
        "matches",
        "score",
    ])?;
    for (r, baseline) in &all {
        for (i, p) in probes.probes.iter().enumerate() {
            let Some(m) = r.matches[i] else { continue };
            t.row(vec![
                r.checkpoint.to_string(),
                baseline.to_string(),
                p.chunk.to_string(),
                p.sequence.to_string(),
                p.crosses_boundary.to_string(),
                r.nan_skipped.contains(&p.chunk).to_string(),
                m.to_string(),
                num(r.score(i)),
            ])?;
        }
    }
    t.save(&out_dir.join(REPORT_FILES[0]))?;

    let mut t = Table::new(&["checkpoint", "matches", "score", "count"])?;
    for (r, _) in &all {
        for (m, count) in r.histogram().into_iter().enumerate() {
            t.row(vec![
                r.checkpoint.to_string(),
                m.to_string(),
                (m as f64 / r.l as f64).to_string(),
                count.to_string(),
            ])?;
        }
    }
    t.save(&out_dir.join(REPORT_FILES[1]))?;

    let mut t = Table::new(&[
        "checkpoint",
        "step",
        "probes",
        "mean_score",
        "standard_error",
        "extractible_fraction",
        "pct_score_1",
    ])?;
    for (r, _) in &all {
        let s = CheckpointSummary::of(r);
        t.row(vec![
            s.checkpoint.to_string(),
            s.step.to_string(),
            s.probes.to_string(),
            num(s.mean_score),
            num(s.standard_error),
            num(s.extractible_fraction),
            num(s.extractible_fraction.map(|f| 100.0 * f)),
        ])?;
    }
    t.save(&out_dir.join(REPORT_FILES[2]))?;

    let m = &report.matrix;
    let mut t = Table::new(&[
        "checkpoint",
        "group",
        "chunk_start",
        "chunk_end",
        "probes",
        "mean_score",
        "latest_seen",
    ])?;
    for (row, ckpt) in m.checkpoints.iter().enumerate() {
        for (g, group) in m.groups.iter().enumerate() {
            let cell = &m.cells[row][g];
            t.row(vec![
                ckpt.to_string(),
                g.to_string(),
                group.start.to_string(),
                group.end.to_string(),
                cell.probes.to_string(),
                num(cell.mean_score),
                (m.latest[row] == Some(g)).to_string(),
            ])?;
        }
    }
    t.save(&out_dir.join(REPORT_FILES[3]))?;

    let c = &report.correlations;
    let mut t = Table::new(&[
        "checkpoint_a",
        "checkpoint_b",
        "common_probes",
        "pearson_score",
        "binary_agreement",
    ])?;
    for (i, a) in c.checkpoints.iter().enumerate() {
        for (j, b) in c.checkpoints.iter().enumerate() {
            let cell = c.cells[i][j];
            t.row(vec![
                a.to_string(),
                b.to_string(),
                cell.map_or(0, |x| x.common_probes).to_string(),
                num(cell.and_then(|x| x.pearson_score)),
                num(cell.and_then(|x| x.binary_agreement)),
            ])?;
        }
    }
    t.save(&out_dir.join(REPORT_FILES[4]))?;

    let (recency_hits, recency_rows) = m.recency_rows(&report.results, probes);
    let summary = Summary {
        manifest_checksum: &report.manifest_checksum,
        k: probes.k,
        l: probes.l,
        probes_per_chunk: probes.n_per_chunk,
        probe_seed: probes.seed,
        total_probes: probes.probes.len(),
        boundary_crossing_probes: probes.probes.iter().filter(|p| p.crosses_boundary).count(),
        baseline: report.baseline.as_ref().map(CheckpointSummary::of),
        checkpoints: report.results.iter().map(CheckpointSummary::of).collect(),
        recency_rows,
        recency_hits,
        adjacent_pearson: c.adjacent_pearson(),
        correlation_metrics: ["pearson_score", "binary_agreement (phi)"],
        warnings: &report.warnings,
        files: REPORT_FILES,
    };
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_atomic(&out_dir.join(REPORT_FILES[5]), json.as_bytes())?;
    Ok(REPORT_FILES.iter().map(|f| out_dir.join(f)).collect())
}
