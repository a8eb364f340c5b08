//! Append-only metric log: newline-delimited JSON rows that replay into
//! identical summary statistics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, T3Error};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub stage: String,
    pub pairing: String,
    pub loss: Option<f64>,
    pub metric_name: String,
    pub metric_value: f64,
    pub lr: f64,
}

/// Writer that appends each row to an optional file as it is recorded.
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
    path: Option<PathBuf>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        MetricLog {
            rows: Vec::new(),
            path: None,
        }
    }

    /// Truncates any existing file at `path`.
    pub fn at_path(path: &Path) -> Result<Self> {
        std::fs::write(path, b"")
            .map_err(|e| T3Error::Io(format!("cannot create metric log {}: {e}", path.display())))?;
        Ok(MetricLog {
            rows: Vec::new(),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| T3Error::Io(format!("cannot append to {}: {e}", path.display())))?;
            writeln!(f, "{}", serde_json::to_string(&row)?)
                .map_err(|e| T3Error::Io(e.to_string()))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vec<MetricRow>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| T3Error::Io(format!("cannot read {}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            rows.push(serde_json::from_str(line)?);
        }
        Ok(rows)
    }
}

/// Per (pairing, metric) statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(rows: &[MetricRow]) -> BTreeMap<(String, String), MetricSummary> {
    let mut out: BTreeMap<(String, String), MetricSummary> = BTreeMap::new();
    for r in rows {
        let key = (r.pairing.clone(), r.metric_name.clone());
        let e = out.entry(key).or_insert(MetricSummary {
            count: 0,
            mean: 0.0,
            last: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        });
        e.count += 1;
        e.mean += (r.metric_value - e.mean) / e.count as f64;
        e.last = r.metric_value;
        e.min = e.min.min(r.metric_value);
        e.max = e.max.max(r.metric_value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, value: f64) -> MetricRow {
        MetricRow {
            step,
            stage: "pretrain1".into(),
            pairing: "wedge/mae".into(),
            loss: Some(value),
            metric_name: "train_loss".into(),
            metric_value: value,
            lr: 1e-4,
        }
    }

    #[test]
    fn replay_reproduces_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut log = MetricLog::at_path(&path).unwrap();
        for (i, v) in [0.9, 0.5, 0.31, 0.22].into_iter().enumerate() {
            log.push(row(i, v)).unwrap();
        }
        let replayed = MetricLog::load(&path).unwrap();
        assert_eq!(replayed, log.rows);
        assert_eq!(summarize(&replayed), summarize(&log.rows));
    }

    #[test]
    fn summary_statistics() {
        let rows: Vec<MetricRow> = [1.0, 3.0, 2.0].iter().enumerate().map(|(i, &v)| row(i, v)).collect();
        let s = &summarize(&rows)[&("wedge/mae".to_string(), "train_loss".to_string())];
        assert_eq!(s.count, 3);
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert_eq!(s.last, 2.0);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 3.0);
    }
}
