//! Newline-delimited JSON training log.
//!
//! The first line carries the effective configuration as `{"config": "..."}`;
//! every following line is one [`MetricsRecord`] averaged over a window of
//! `stats_interval` steps.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::StepRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Steps completed when the record was written.
    pub step: u64,
    pub loss_lm: f64,
    pub loss_b: f64,
    pub loss_d: f64,
    pub lr: f64,
    pub mean_experts: f64,
    pub mean_experts_per_layer: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ConfigLine {
    config: String,
}

/// Running mean of step records between two log lines.
#[derive(Default)]
pub struct MetricsWindow {
    count: usize,
    lm: f64,
    b: f64,
    d: f64,
    lr: f64,
    experts: f64,
    per_layer: Vec<f64>,
}

impl MetricsWindow {
    pub fn push(&mut self, r: &StepRecord) {
        self.count += 1;
        self.lm += r.losses.loss_lm;
        self.b += r.losses.loss_balance;
        self.d += r.losses.loss_dynamic;
        self.lr += r.lr;
        self.experts += r.mean_experts;
        if self.per_layer.is_empty() {
            self.per_layer = vec![0.0; r.mean_experts_per_layer.len()];
        }
        for (acc, v) in self.per_layer.iter_mut().zip(&r.mean_experts_per_layer) {
            *acc += v;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Emits the window mean and resets.
    pub fn flush(&mut self, step: u64) -> MetricsRecord {
        let n = self.count.max(1) as f64;
        let rec = MetricsRecord {
            step,
            loss_lm: self.lm / n,
            loss_b: self.b / n,
            loss_d: self.d / n,
            lr: self.lr / n,
            mean_experts: self.experts / n,
            mean_experts_per_layer: self.per_layer.iter().map(|v| v / n).collect(),
        };
        *self = MetricsWindow::default();
        rec
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Opens `path` for appending; a new file starts with the config line.
    pub fn open(path: &Path, config_text: &str) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        if fresh {
            let line = serde_json::to_string(&ConfigLine {
                config: config_text.to_string(),
            })
            .expect("serializable");
            w.write_line(&line)?;
        }
        Ok(w)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("serializable");
        self.write_line(&line)
    }
}

/// Reads back the metric records of a log, skipping the config line.
pub fn read_metrics(path: &Path) -> Result<(Option<String>, Vec<MetricsRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut config = None;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(c) = serde_json::from_str::<ConfigLine>(&line) {
            config = Some(c.config);
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}: bad metrics line: {e}", path.display())))?;
        out.push(rec);
    }
    Ok((config, out))
}
