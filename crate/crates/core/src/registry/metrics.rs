//! Append-only per-step metrics in JSON lines, with CSV export.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeBounds;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::hash::sha256_file;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub chunk: u32,
    pub loss: f64,
    pub grad_norm_preclip: f64,
    pub lr: f64,
    pub tokens_per_second: f64,
    /// Seconds since the Unix epoch.
    pub wall_time: f64,
}

pub struct MetricsLedger {
    path: PathBuf,
    file: File,
    last_step: Option<u64>,
    len: usize,
}

fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

impl MetricsLedger {
    /// Opens (creating if needed) a ledger and checks the existing lines.
    pub fn open(path: &Path) -> Result<Self> {
        let records = read_records(path)?;
        let mut last_step = None;
        for r in &records {
            if last_step.is_some_and(|s| r.step <= s) {
                return Err(Error::Format(format!(
                    "{}: step {} does not increase",
                    path.display(),
                    r.step
                )));
            }
            last_step = Some(r.step);
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last_step,
            len: records.len(),
        })
    }

    /// Starts an empty ledger, discarding any previous file.
    pub fn create(path: &Path) -> Result<Self> {
        write_atomic(path, b"")?;
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        self.append_all(std::slice::from_ref(record))
    }

    /// Appends records in one write; nothing is written if any step is out of order.
    pub fn append_all(&mut self, records: &[MetricsRecord]) -> Result<()> {
        let mut last = self.last_step;
        let mut buf = Vec::new();
        for r in records {
            if let Some(prev) = last.filter(|&p| r.step <= p) {
                return Err(Error::Invalid(format!(
                    "metrics step {} does not follow step {prev}",
                    r.step
                )));
            }
            last = Some(r.step);
            serde_json::to_writer(&mut buf, r).map_err(|e| Error::Format(e.to_string()))?;
            buf.push(b'\n');
        }
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_step = last;
        self.len += records.len();
        Ok(())
    }

    pub fn sync(&self) -> Result<()> {
        self.file.sync_all().map_err(|e| Error::io(&self.path, e))
    }
}

/// Records whose step lies in `range`, in step order.
pub fn query_metrics(path: &Path, range: impl RangeBounds<u64>) -> Result<Vec<MetricsRecord>> {
    let mut out: Vec<_> = read_records(path)?
        .into_iter()
        .filter(|r| range.contains(&r.step))
        .collect();
    out.sort_by_key(|r| r.step);
    Ok(out)
}

/// Drops records after `step`; used when resuming from a checkpoint.
pub fn truncate_metrics(path: &Path, step: u64) -> Result<usize> {
    let kept: Vec<_> = read_records(path)?.into_iter().filter(|r| r.step <= step).collect();
    let mut buf = Vec::new();
    for r in &kept {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)?;
    Ok(kept.len())
}

/// Writes the whole ledger as CSV and returns the CSV's SHA-256.
pub fn export_metrics_csv(jsonl: &Path, csv_path: &Path) -> Result<String> {
    let records = query_metrics(jsonl, ..)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record([
            "step",
            "chunk",
            "loss",
            "grad_norm_preclip",
            "lr",
            "tokens_per_second",
            "wall_time",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in &records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(csv_path, &bytes)?;
    sha256_file(csv_path)
}
