//! Per-epoch search log and logit history, both written as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row per epoch.
///
/// The `*_forwards` columns are cumulative: `train_forwards` counts
/// training samples pushed through the supernet, `val_forwards` counts
/// validation samples used by architecture updates, and `sample_forwards`
/// is their sum. `candidate_forwards` counts block evaluations (samples
/// times alive candidates summed over layers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub phase: String,
    pub step: usize,
    pub epoch: usize,
    pub classes: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub expected_cost: f64,
    pub penalty: f64,
    /// Alive candidates per layer, `;`-separated.
    pub alive: String,
    pub lr_weights: f64,
    pub train_forwards: u64,
    pub val_forwards: u64,
    pub sample_forwards: u64,
    pub candidate_forwards: u64,
}

impl EpochRow {
    pub fn alive_counts(&self) -> Vec<usize> {
        self.alive.split(';').filter_map(|s| s.parse().ok()).collect()
    }
}

pub fn join_counts(counts: &[usize]) -> String {
    counts.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchLog {
    pub rows: Vec<EpochRow>,
}

impl SearchLog {
    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }

    pub fn sample_forwards(&self) -> u64 {
        self.last().map_or(0, |r| r.sample_forwards)
    }

    pub fn train_forwards(&self) -> u64 {
        self.last().map_or(0, |r| r.train_forwards)
    }

    pub fn candidate_forwards(&self) -> u64 {
        self.last().map_or(0, |r| r.candidate_forwards)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(COLUMNS)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRow>, _>>()?;
        Ok(SearchLog { rows })
    }
}

pub const COLUMNS: [&str; 14] = [
    "phase",
    "step",
    "epoch",
    "classes",
    "train_loss",
    "val_loss",
    "expected_cost",
    "penalty",
    "alive",
    "lr_weights",
    "train_forwards",
    "val_forwards",
    "sample_forwards",
    "candidate_forwards",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub step: usize,
    pub layer: usize,
    pub candidate: usize,
    pub logit: f64,
}

pub fn write_logit_history(rows: &[LogitRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["step", "layer", "candidate", "logit"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
