use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::TrainError;

/// One optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// ORPO loss, or GRPO objective, before the update.
    pub value: f64,
    pub lr_multiplier: f64,
    /// Mean candidate reward (GRPO only).
    pub mean_reward: Option<f64>,
    /// Groups whose advantages were all zero (GRPO only).
    pub degenerate_groups: usize,
    /// The update was skipped because the gradient was not finite.
    pub rejected: bool,
}

/// Per-step training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    records: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: u64,
    value: f64,
    lr_multiplier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_reward: Option<f64>,
}

impl TrainTrace {
    pub fn from_records(records: Vec<StepRecord>) -> Result<Self, TrainError> {
        if records.windows(2).any(|w| w[1].step <= w[0].step) {
            return Err(TrainError::Trace("step indices must strictly increase".into()));
        }
        Ok(Self { records })
    }

    pub(crate) fn push(&mut self, record: StepRecord) {
        debug_assert!(self.records.last().map_or(true, |r| r.step < record.step));
        self.records.push(record);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    pub fn mean_rewards(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.mean_reward).collect()
    }

    /// Writes `step,value,lr_multiplier[,mean_reward]`. The reward column is
    /// present only when every record carries a reward.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TrainError> {
        let with_reward = !self.records.is_empty() && self.records.iter().all(|r| r.mean_reward.is_some());
        let mut out = csv::Writer::from_writer(w);
        let header: &[&str] = if with_reward {
            &["step", "value", "lr_multiplier", "mean_reward"]
        } else {
            &["step", "value", "lr_multiplier"]
        };
        out.write_record(header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.value.to_string(), r.lr_multiplier.to_string()];
            if with_reward {
                row.push(r.mean_reward.unwrap_or_default().to_string());
            }
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, TrainError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(csv_err)?;
            records.push(StepRecord {
                step: row.step,
                value: row.value,
                lr_multiplier: row.lr_multiplier,
                mean_reward: row.mean_reward,
                degenerate_groups: 0,
                rejected: false,
            });
        }
        Self::from_records(records)
    }
}

fn csv_err(e: csv::Error) -> TrainError {
    TrainError::Trace(e.to_string())
}

/// Trailing moving average; the first `window - 1` entries average over what
/// is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
