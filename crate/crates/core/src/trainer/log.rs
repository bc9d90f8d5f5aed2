use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Stage;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

/// One line of the training log. Pretraining records carry the contrastive
/// loss in `total` and zeros for the stage-2 terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: u64,
    pub l_rec: f64,
    pub l_uv: f64,
    pub l_style: f64,
    pub l_ip: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl LogRecord {
    pub fn joint(step: u64, b: &LossBreakdown, lr: f64, wall_time: f64) -> Self {
        Self {
            stage: Stage::Joint,
            step,
            l_rec: b.rec,
            l_uv: b.uv,
            l_style: b.style,
            l_ip: b.ip,
            total: b.total,
            lr,
            wall_time,
        }
    }

    pub fn pretrain(step: u64, loss: f64, lr: f64, wall_time: f64) -> Self {
        Self {
            stage: Stage::Pretrain,
            step,
            l_rec: 0.0,
            l_uv: 0.0,
            l_style: 0.0,
            l_ip: 0.0,
            total: loss,
            lr,
            wall_time,
        }
    }

    /// Raw bits of every loss field; equal iff the losses are bit-identical.
    pub fn loss_bits(&self) -> [u64; 5] {
        [self.l_rec, self.l_uv, self.l_style, self.l_ip, self.total].map(f64::to_bits)
    }
}

/// Append-only log with strictly increasing steps, optionally mirrored to a
/// JSON-lines file.
#[derive(Debug, Default)]
pub struct TrainingLog {
    records: Vec<LogRecord>,
    sink: Option<File>,
}

impl TrainingLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, keeping whatever it already holds.
    pub fn open(path: &Path) -> Result<Self> {
        let records = if path.is_file() {
            read_log(path)?
        } else {
            Vec::new()
        };
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records,
            sink: Some(sink),
        })
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(last) = self.records.iter().rev().find(|r| r.stage == record.stage) {
            if record.step <= last.step {
                return Err(Error::State(format!(
                    "log step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        if let Some(f) = &mut self.sink {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn totals(&self, stage: Stage) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.total)
            .collect()
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
