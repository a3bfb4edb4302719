//! Trains a derived architecture from scratch.

use serde::{Deserialize, Serialize};

use crate::data::SplitPair;
use crate::error::{Error, Result};
use crate::nn::{Model, StandaloneNet};
use crate::seed::{self, Stream};
use crate::supernet::ArchDescriptor;
use crate::train::{self, FitConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub flops: u64,
    pub params: usize,
    pub epochs: usize,
}

/// Default fine-tune settings: SGD at 0.1 with cosine decay.
pub fn default_fit(epochs: usize, seed: u64) -> FitConfig {
    FitConfig {
        epochs,
        seed,
        ..FitConfig::default()
    }
}

/// Builds the stand-alone network of `arch`, trains it on `data.train` and
/// reports top-1 on `data.val`.
pub fn finetune(
    arch: &ArchDescriptor,
    data: &SplitPair,
    cfg: &FitConfig,
) -> Result<(StandaloneNet, Metrics)> {
    let want = arch.scaffold.input;
    let got = data.train.sample_shape();
    if want != got {
        return Err(Error::Shape(format!(
            "architecture expects input {want:?}, data has {got:?}"
        )));
    }
    if arch.scaffold.classes != data.train.num_classes() {
        return Err(Error::Shape(format!(
            "architecture has {} outputs, data has {} classes",
            arch.scaffold.classes,
            data.train.num_classes()
        )));
    }
    let mut rng = seed::stream(cfg.seed, Stream::Finetune);
    let mut net = arch.build(&mut rng)?;
    train::fit(&mut net, &data.train, cfg)?;
    let top1 = if data.val.is_empty() {
        log::warn!("empty validation split; reporting training accuracy");
        train::accuracy(&net, &data.train)?
    } else {
        train::accuracy(&net, &data.val)?
    };
    let metrics = Metrics {
        top1,
        flops: net.flops()?,
        params: net.param_count(),
        epochs: cfg.epochs,
    };
    Ok((net, metrics))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}
