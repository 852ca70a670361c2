use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};

pub const METRICS_HEADER: &str =
    "step,stage,pass,event,method,eval_mean,eval_std,coherency,divergence_gap,loss,grad_norm,mean_reward,lr,seed";

/// One row of the metrics log. Missing values are written as empty fields.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    pub pass: usize,
    pub event: String,
    pub method: String,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
    pub coherency: Option<f64>,
    pub divergence_gap: Option<f64>,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub mean_reward: Option<f64>,
    pub lr: Option<f64>,
    pub seed: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| Error::Format(format!("bad number `{s}` in metrics")))
    }
}

impl MetricsRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage,
            self.pass,
            self.event,
            self.method,
            opt(self.eval_mean),
            opt(self.eval_std),
            opt(self.coherency),
            opt(self.divergence_gap),
            opt(self.loss),
            opt(self.grad_norm),
            opt(self.mean_reward),
            opt(self.lr),
            self.seed
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 14, Format, "metrics row has {} fields, expected 14", f.len());
        let int = |s: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("bad integer `{s}` in metrics")));
        Ok(Self {
            step: int(f[0])?,
            stage: f[1].into(),
            pass: int(f[2])? as usize,
            event: f[3].into(),
            method: f[4].into(),
            eval_mean: parse_opt(f[5])?,
            eval_std: parse_opt(f[6])?,
            coherency: parse_opt(f[7])?,
            divergence_gap: parse_opt(f[8])?,
            loss: parse_opt(f[9])?,
            grad_norm: parse_opt(f[10])?,
            mean_reward: parse_opt(f[11])?,
            lr: parse_opt(f[12])?,
            seed: int(f[13])?,
        })
    }
}

/// Append-only metrics log, optionally mirrored to a CSV file that is
/// flushed on every record.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
    file: Option<(PathBuf, File)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut f = File::create(path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f.flush()?;
        Ok(Self {
            records: Vec::new(),
            file: Some((path.to_path_buf(), f)),
        })
    }

    /// Reopens an existing log for appending, keeping its records.
    pub fn resume(path: &Path) -> Result<Self> {
        let records = read_metrics(path)?;
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            records,
            file: Some((path.to_path_buf(), f)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.records.last().map(|r| r.step)
    }

    /// Appends a record; steps may repeat but never decrease.
    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_step() {
            ensure!(record.step >= last, Contract, "metrics step {} precedes {last}", record.step);
        }
        if let Some((_, f)) = self.file.as_mut() {
            writeln!(f, "{}", record.to_csv())?;
            f.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => return Err(Error::Format("metrics file lacks the expected header".into())),
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRecord::from_csv).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_metrics(&std::fs::read_to_string(path)?)
}
