//! Training telemetry: per-step, per-epoch, and evaluation records, written
//! as newline-delimited JSON with a `kind` discriminator.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PrPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub similarity_loss: f64,
    pub quantization_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    /// Dead bits of this training batch, measured on pre-amplification
    /// gradients.
    pub dead_count: u64,
    pub total_bits: u64,
}

/// Epoch-end record carrying the full-train-split dead-bit scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dead_count: u64,
    pub total_bits: u64,
    pub dead_fraction: f64,
    pub mean_step_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub top_k: usize,
    pub map: f64,
    pub pr: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Eval(EvalRecord),
}

/// The full log of one training run, in emission order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn new() -> Self {
        TrainingLog::default()
    }

    pub fn push(&mut self, record: LogRecord) {
        if let LogRecord::Step(s) = &record {
            debug_assert!(
                self.steps().next_back().map_or(true, |prev| prev.step < s.step),
                "step numbers must be strictly increasing"
            );
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn steps(&self) -> impl DoubleEndedIterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl DoubleEndedIterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl DoubleEndedIterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    pub fn to_ndjson_string(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_ndjson(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_ndjson_string().as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_ndjson_string())?;
        Ok(())
    }

    pub fn from_ndjson(reader: impl BufRead) -> Result<TrainingLog> {
        let mut log = TrainingLog::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: (lineno + 1) as u64,
                message: format!("bad log record: {e}"),
            })?;
            log.records.push(record);
        }
        Ok(log)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<TrainingLog> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::data(format!(
                "cannot open log file {}: {e}",
                path.as_ref().display()
            ))
        })?;
        Self::from_ndjson(std::io::BufReader::new(file))
    }
}
