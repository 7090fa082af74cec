//! Append-only metrics log and confidence intervals.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "iteration,split,metric,mean,ci95,seconds";

/// Mean and 95% half-width `1.96·s/√n` (sample standard deviation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

/// With a single value the half-width is reported as 0.
pub fn mean_ci(values: &[f64]) -> Result<Stat> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Contract("no values to summarize".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(Stat { mean, ci95: 0.0, n });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(Stat { mean, ci95: 1.96 * var.sqrt() / (n as f64).sqrt(), n })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub ci95: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.iter().rev().find(|r| r.split == row.split) {
            if row.iteration < last.iteration {
                return Err(Error::Contract(format!(
                    "{} iteration {} logged after {}",
                    row.split, row.iteration, last.iteration
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn record(&mut self, iteration: usize, split: &str, metric: &str, stat: Stat, seconds: f64) -> Result<()> {
        self.push(MetricRow {
            iteration,
            split: split.into(),
            metric: metric.into(),
            mean: stat.mean,
            ci95: stat.ci95,
            seconds,
        })
    }

    pub fn rows_for<'a>(&'a self, split: &'a str, metric: &'a str) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| r.split == split && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:?},{:?},{:?}", r.iteration, r.split, r.metric, r.mean, r.ci95, r.seconds);
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format("metrics CSV header mismatch".into()));
        }
        let mut log = MetricsLog::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number in {line:?}")));
            if f.len() != 6 {
                return Err(Error::Format(format!("expected 6 fields in {line:?}")));
            }
            log.push(MetricRow {
                iteration: f[0].parse().map_err(|_| Error::Format(format!("bad iteration in {line:?}")))?,
                split: f[1].into(),
                metric: f[2].into(),
                mean: num(f[3])?,
                ci95: num(f[4])?,
                seconds: num(f[5])?,
            })?;
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
