use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, TrainError};
use crate::model::LossBreakdown;

pub const METRICS_HEADER: &str = "step,L,L_obs,L_mask";

/// Losses on the batch used for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub loss_obs: Option<f64>,
    pub loss_mask: Option<f64>,
}

impl MetricRecord {
    pub fn from_breakdown(step: u64, l: &LossBreakdown) -> Self {
        Self {
            step,
            loss: l.total,
            loss_obs: l.observed,
            loss_mask: l.masked,
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.step, self.loss, opt(self.loss_obs), opt(self.loss_mask))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub records: Vec<MetricRecord>,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

impl MetricSeries {
    pub fn new(seed: u64) -> Self {
        Self {
            records: Vec::new(),
            wall_clock_secs: 0.0,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// Checks that steps increase strictly and losses are finite and
    /// non-negative.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut prev = None;
        for r in &self.records {
            if prev.is_some_and(|p| r.step <= p) {
                return Err(TrainError::InvalidSeries(format!("step {} does not increase", r.step)));
            }
            prev = Some(r.step);
            for v in [Some(r.loss), r.loss_obs, r.loss_mask].into_iter().flatten() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(TrainError::InvalidSeries(format!("bad loss {v} at step {}", r.step)));
                }
            }
        }
        Ok(())
    }

    /// Mean over the last `k` records of a metric.
    pub fn tail_mean(&self, k: usize, metric: impl Fn(&MetricRecord) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.records.iter().rev().take(k).filter_map(metric).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = MetricsWriter::create(path)?;
        for r in &self.records {
            w.push(r)?;
        }
        w.flush()
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<Self, TrainError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().transpose().map_err(io_err(path))?;
        if header.as_deref().map(str::trim) != Some(METRICS_HEADER) {
            return Err(TrainError::InvalidSeries(format!("{}: bad header", path.display())));
        }
        let mut series = Self::new(seed);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || TrainError::InvalidSeries(format!("{}: malformed row {}", path.display(), i + 2));
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let opt = |s: &str| -> Result<Option<f64>, TrainError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad())
                }
            };
            series.records.push(MetricRecord {
                step: fields[0].parse().map_err(|_| bad())?,
                loss: fields[1].parse().map_err(|_| bad())?,
                loss_obs: opt(fields[2])?,
                loss_mask: opt(fields[3])?,
            });
        }
        Ok(series)
    }
}

/// Appends rows to `metrics.csv` as training proceeds.
pub(crate) struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub(crate) fn create(path: &Path) -> Result<Self, TrainError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(io_err(path))?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
        })
    }

    pub(crate) fn push(&mut self, r: &MetricRecord) -> Result<(), TrainError> {
        writeln!(self.out, "{}", r.csv_row()).map_err(io_err(&self.path))
    }

    pub(crate) fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut s = MetricSeries::new(3);
        s.records.push(MetricRecord {
            step: 1,
            loss: 0.125,
            loss_obs: Some(1e-7),
            loss_mask: None,
        });
        s.records.push(MetricRecord {
            step: 2,
            loss: 0.1,
            loss_obs: Some(0.05),
            loss_mask: Some(0.2236),
        });
        s.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,L,L_obs,L_mask\n1,0.125,0.0000001,\n"));
        let back = MetricSeries::read_csv(&path, 3).unwrap();
        assert_eq!(back.records, s.records);
    }

    #[test]
    fn validation() {
        let mut s = MetricSeries::new(0);
        let r = MetricRecord {
            step: 2,
            loss: 0.1,
            loss_obs: None,
            loss_mask: None,
        };
        s.records.push(r);
        s.records.push(r);
        assert!(s.validate().is_err());
        s.records[1].step = 3;
        s.validate().unwrap();
        s.records[1].loss = f64::NAN;
        assert!(s.validate().is_err());
    }
}
