use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::objective::LossBreakdown;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub sia: f64,
    pub sia_aug: f64,
    pub siva: f64,
    pub sila: f64,
    pub sta: f64,
    pub total: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn new(epoch: usize, split: Split, b: &LossBreakdown, lr: f64) -> Self {
        Self {
            epoch,
            split,
            sia: b.sia,
            sia_aug: b.sia_aug,
            siva: b.siva,
            sila: b.sila,
            sta: b.sta,
            total: b.total,
            lr,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            sia: self.sia,
            sia_aug: self.sia_aug,
            siva: self.siva,
            sila: self.sila,
            sta: self.sta,
            total: self.total,
        }
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["epoch", "split", "sia", "sia_aug", "siva", "sila", "sta", "total", "lr"])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    metrics_from_csv(&std::fs::read_to_string(path)?)
}
