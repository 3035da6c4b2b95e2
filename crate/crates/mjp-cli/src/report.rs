//! Append-only JSON-lines metric log plus per-metric CSV exports.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRecord {
    pub run_id: String,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub seed: u64,
    pub timestamp: u64,
}

pub struct ReportWriter {
    out: BufWriter<File>,
    path: String,
    run_id: String,
    config_hash: String,
    seed: u64,
    /// Injectable clock so deterministic runs can emit byte-identical logs.
    fixed_timestamp: Option<u64>,
}

impl ReportWriter {
    pub fn append(
        path: &Path,
        run_id: impl Into<String>,
        config_hash: impl Into<String>,
        seed: u64,
        fixed_timestamp: Option<u64>,
    ) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path.display().to_string(), e))?;
        Ok(ReportWriter {
            out: BufWriter::new(file),
            path: path.display().to_string(),
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            seed,
            fixed_timestamp,
        })
    }

    fn now(&self) -> u64 {
        self.fixed_timestamp.unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
    }

    pub fn emit(&mut self, metric: &str, value: f64, std: Option<f64>) -> Result<()> {
        if !value.is_finite() {
            return Err(CliError::config(format!(
                "refusing to log non-finite value for {metric}; encode infinities explicitly"
            )));
        }
        let record = ReportRecord {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            metric: metric.to_string(),
            value,
            std,
            seed: self.seed,
            timestamp: self.now(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| CliError::format(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<ReportRecord>> {
    let file = File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReportRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::format(path.display().to_string(), format!("line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn sanitize_metric(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Splits a JSON-lines report into one plot-ready CSV per metric.
pub fn export_csv(report_path: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let records = read_records(report_path)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::io(out_dir.display().to_string(), e))?;
    let mut by_metric: BTreeMap<String, Vec<&ReportRecord>> = BTreeMap::new();
    for r in &records {
        by_metric.entry(r.metric.clone()).or_default().push(r);
    }
    let mut written = Vec::new();
    for (metric, rows) in by_metric {
        let fname = format!("{}.csv", sanitize_metric(&metric));
        let path = out_dir.join(&fname);
        let file =
            File::create(&path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "run_id,config_hash,seed,value,std,timestamp")
            .map_err(|e| CliError::io(path.display().to_string(), e))?;
        for r in rows {
            let std = r.std.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.run_id, r.config_hash, r.seed, r.value, std, r.timestamp
            )
            .map_err(|e| CliError::io(path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| CliError::io(path.display().to_string(), e))?;
        written.push(fname);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emits_parseable_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = ReportWriter::append(&path, "run-1", "cafebabe", 7, Some(1000)).unwrap();
        w.emit("top1", 0.93, None).unwrap();
        w.emit("consistency", 0.88, Some(0.01)).unwrap();
        w.flush().unwrap();
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].metric, "top1");
        assert_eq!(records[1].std, Some(0.01));
        assert_eq!(records[1].timestamp, 1000);
    }

    #[test]
    fn fixed_clock_makes_reports_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str| {
            let path = dir.path().join(name);
            let mut w = ReportWriter::append(&path, "run-x", "hash", 3, Some(42)).unwrap();
            w.emit("a", 1.5, None).unwrap();
            w.emit("b", 2.5, Some(0.5)).unwrap();
            w.flush().unwrap();
            std::fs::read(&path).unwrap()
        };
        assert_eq!(write("a.jsonl"), write("b.jsonl"));
    }

    #[test]
    fn appending_preserves_existing_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        {
            let mut w = ReportWriter::append(&path, "one", "h", 1, Some(5)).unwrap();
            w.emit("m", 1.0, None).unwrap();
            w.flush().unwrap();
        }
        {
            let mut w = ReportWriter::append(&path, "two", "h", 2, Some(6)).unwrap();
            w.emit("m", 2.0, None).unwrap();
            w.flush().unwrap();
        }
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].run_id, "one");
        assert_eq!(records[1].run_id, "two");
    }

    #[test]
    fn non_finite_values_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = ReportWriter::append(&path, "run", "h", 1, Some(0)).unwrap();
        assert!(w.emit("bad", f64::INFINITY, None).is_err());
    }

    #[test]
    fn csv_export_groups_by_metric() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut w = ReportWriter::append(&path, "run", "h", 1, Some(0)).unwrap();
        w.emit("top1", 0.9, None).unwrap();
        w.emit("consistency[gamma=0.15]", 0.8, Some(0.02)).unwrap();
        w.emit("top1", 0.95, None).unwrap();
        w.flush().unwrap();
        let out = dir.path().join("csv");
        let files = export_csv(&path, &out).unwrap();
        assert_eq!(files.len(), 2);
        let top1 = std::fs::read_to_string(out.join("top1.csv")).unwrap();
        assert_eq!(top1.lines().count(), 3); // header + 2 rows
        assert!(out.join("consistency_gamma_0.15_.csv").exists());
    }
}
