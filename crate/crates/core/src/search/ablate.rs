//! Scheduling and pruning ablations sharing seeds and epoch budgets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::SearchConfig;
use super::driver::Searcher;
use super::finetune::{finetune, Metrics};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::FitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Easiest classes first, growing to all.
    EasyToAll,
    /// Hardest classes first, growing to all.
    HardToAll,
    /// Every phase on the warmup subset of easy classes.
    SmallOnly,
    /// Every phase on all classes.
    AllOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::EasyToAll,
        AblationMode::HardToAll,
        AblationMode::SmallOnly,
        AblationMode::AllOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::EasyToAll => "easy-to-all",
            AblationMode::HardToAll => "hard-to-all",
            AblationMode::SmallOnly => "small-only",
            AblationMode::AllOnly => "all-only",
        }
    }

    /// Ranking and per-phase class counts of this mode.
    pub fn plan(self, cfg: &SearchConfig, ranking: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let k = ranking.len();
        let counts = cfg.class_counts(k);
        match self {
            AblationMode::EasyToAll => (ranking.to_vec(), counts),
            AblationMode::HardToAll => (ranking.iter().rev().copied().collect(), counts),
            AblationMode::SmallOnly => (ranking.to_vec(), vec![counts[0]; counts.len()]),
            AblationMode::AllOnly => (ranking.to_vec(), vec![k; counts.len()]),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub top1: f64,
    pub flops: u64,
    pub params: usize,
    pub sample_forwards: u64,
    pub candidate_forwards: u64,
}

/// Searches with `mode`, then trains the derived architecture from scratch
/// on all classes.
pub fn ablate_one(
    cfg: &SearchConfig,
    data: &Dataset,
    ranking: &[usize],
    mode: AblationMode,
    fit: &FitConfig,
) -> Result<AblationRow> {
    let (order, counts) = mode.plan(cfg, ranking);
    let mut s = Searcher::with_counts(cfg, data, &order, &counts)?;
    let arch = s.run(None)?;
    let (
        _,
        Metrics {
            top1, flops, params, ..
        },
    ) = finetune(&arch, s.split(), fit)?;
    Ok(AblationRow {
        mode,
        seed: cfg.seed,
        top1,
        flops,
        params,
        sample_forwards: s.log.sample_forwards(),
        candidate_forwards: s.log.candidate_forwards(),
    })
}

pub fn ablate(
    cfg: &SearchConfig,
    data: &Dataset,
    ranking: &[usize],
    modes: &[AblationMode],
    fit: &FitConfig,
) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&m| ablate_one(cfg, data, ranking, m, fit))
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record([
            r.mode.name().to_string(),
            r.seed.to_string(),
            r.top1.to_string(),
            r.flops.to_string(),
            r.params.to_string(),
            r.sample_forwards.to_string(),
            r.candidate_forwards.to_string(),
        ])?;
    }
    let body = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(format!(
        "mode,seed,top1,flops,params,sample_forwards,candidate_forwards\n{}",
        String::from_utf8_lossy(&body)
    ))
}
