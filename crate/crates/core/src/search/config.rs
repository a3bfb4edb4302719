use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::SpaceSpec;

/// A preset name or an inline space declaration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceRef {
    Preset(String),
    Inline(SpaceSpec),
}

impl SpaceRef {
    pub fn resolve(&self) -> Result<SpaceSpec> {
        let s = match self {
            SpaceRef::Preset(name) => SpaceSpec::preset(name)?,
            SpaceRef::Inline(s) => s.clone(),
        };
        s.validate()?;
        Ok(s)
    }
}

fn d_schedule() -> Vec<f64> {
    vec![0.1, 0.3, 0.6, 1.0]
}
fn d_warmup() -> usize {
    5
}
fn d_epochs() -> usize {
    10
}
fn d_steps() -> usize {
    3
}
fn d_ratio() -> f64 {
    0.4
}
fn d_tau() -> f64 {
    5.0
}
fn d_gamma() -> f64 {
    1.0
}
fn d_lr_w() -> f64 {
    0.05
}
fn d_lr_a() -> f64 {
    3e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_batch() -> usize {
    32
}
fn d_val() -> usize {
    5
}
fn d_true() -> bool {
    true
}

pub const MIN_BATCH: usize = 8;

/// Normalization statistics used while updating architecture logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchNorm {
    /// Statistics of the validation batch itself.
    #[default]
    Batch,
    /// Running averages accumulated during weight passes. Keeps the scale
    /// of a mixture visible to the loss, so a candidate that only shrinks
    /// its output is not hidden by the next normalization.
    Running,
}

/// Everything one search run consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub space: SpaceRef,
    /// Fractions of the classes used by warmup and each search step.
    #[serde(default = "d_schedule")]
    pub class_schedule: Vec<f64>,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_epochs")]
    pub epochs_per_step: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_ratio")]
    pub prune_ratio: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    /// Target FLOPs.
    pub beta: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Base rate of the cosine schedule for supernet weights.
    #[serde(default = "d_lr_w")]
    pub lr_weights: f64,
    /// Constant rate for architecture logits.
    #[serde(default = "d_lr_a")]
    pub lr_arch: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_val")]
    pub per_class_val: usize,
    #[serde(default)]
    pub seed: u64,
    /// Grow the class subset; when false every phase uses all classes.
    #[serde(default = "d_true")]
    pub schedule: bool,
    #[serde(default = "d_true")]
    pub prune: bool,
    #[serde(default)]
    pub arch_norm: ArchNorm,
    /// Alternate weight and architecture updates per batch instead of per epoch.
    #[serde(default)]
    pub interleave: bool,
    /// Easiness profile to rank classes with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
}

impl SearchConfig {
    pub fn new(space: SpaceRef, beta: f64) -> Self {
        SearchConfig {
            space,
            class_schedule: d_schedule(),
            warmup_epochs: d_warmup(),
            epochs_per_step: d_epochs(),
            steps: d_steps(),
            prune_ratio: d_ratio(),
            tau: d_tau(),
            beta,
            gamma: d_gamma(),
            lr_weights: d_lr_w(),
            lr_arch: d_lr_a(),
            momentum: d_momentum(),
            weight_decay: 0.0,
            batch_size: d_batch(),
            per_class_val: d_val(),
            seed: 0,
            schedule: true,
            prune: true,
            arch_norm: ArchNorm::Batch,
            interleave: false,
            profile: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SearchConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde names the offending field in backticks
            let field = msg.split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.class_schedule;
        if d.is_empty() {
            return Err(Error::config("class_schedule", "must not be empty"));
        }
        if d.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("class_schedule", "must be strictly increasing"));
        }
        if !(d[0] > 0.0) || d[d.len() - 1] != 1.0 {
            return Err(Error::config(
                "class_schedule",
                "fractions must lie in (0, 1] and end at 1.0",
            ));
        }
        if self.steps + 1 != d.len() {
            return Err(Error::config(
                "steps",
                format!(
                    "{} steps need {} schedule entries, got {}",
                    self.steps,
                    self.steps + 1,
                    d.len()
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::config("prune_ratio", "must lie in [0, 1)"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config("beta", "must be positive"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        if !(self.lr_weights > 0.0) {
            return Err(Error::config("lr_weights", "must be positive"));
        }
        if !(self.lr_arch > 0.0) {
            return Err(Error::config("lr_arch", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size < MIN_BATCH {
            return Err(Error::config(
                "batch_size",
                format!("must be at least {MIN_BATCH}"),
            ));
        }
        if self.per_class_val == 0 && self.steps > 0 {
            return Err(Error::config(
                "per_class_val",
                "search steps need validation samples",
            ));
        }
        self.space
            .resolve()
            .map_err(|e| Error::config("space", e.to_string()))?;
        Ok(())
    }

    /// Fractions actually used, after the `schedule` switch.
    pub fn effective_schedule(&self) -> Vec<f64> {
        if self.schedule {
            self.class_schedule.clone()
        } else {
            vec![1.0; self.class_schedule.len()]
        }
    }

    pub fn prunes(&self) -> bool {
        self.prune && self.prune_ratio > 0.0
    }

    /// Class counts of warmup and each step for `k` classes.
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        self.effective_schedule()
            .iter()
            .map(|f| class_count(*f, k))
            .collect()
    }

    /// Canonical JSON form; the config hash is taken over these bytes.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}

/// `ceil(fraction * k)`, at least 2 and at most `k`.
pub fn class_count(fraction: f64, k: usize) -> usize {
    // tolerate products such as 0.3 * 10 = 3.0000000000000004
    let n = (fraction * k as f64 - 1e-9).ceil().max(0.0) as usize;
    n.max(2).min(k)
}
