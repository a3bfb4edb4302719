//! Class easiness from the prediction entropy of trained reference networks.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BlockSpec, Model, OperatorSpec, Scaffold, Stage, StandaloneNet};
use crate::seed::{self, Stream};
use crate::train::{self, FitConfig};

pub const DEFAULT_BINS: usize = 32;

/// Shannon entropy in nats; `0 log 0 = 0`.
pub fn sample_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Easiness("empty probability vector".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::Easiness(format!("negative or NaN probability {p}")));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-3 {
        return Err(Error::Easiness(format!("probabilities sum to {s}")));
    }
    let h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    Ok(h.clamp(0.0, (probs.len() as f64).ln()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class: usize,
    /// Histogram counts (fractional after aggregation).
    pub counts: Vec<f64>,
    /// Mean entropy of the class's samples.
    pub score: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EasinessProfile {
    pub classes: usize,
    /// Bin edges over `[0, ln K]`, one more than the bin count.
    pub bins: Vec<f64>,
    pub per_class: Vec<ClassProfile>,
    /// Classes from easiest to hardest.
    pub ranking: Vec<usize>,
    pub networks: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Ascending by score, ties by class id.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut r: Vec<usize> = (0..scores.len()).collect();
    r.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b)));
    r
}

fn bin_edges(classes: usize, bins: usize) -> Vec<f64> {
    let top = (classes as f64).ln();
    (0..=bins).map(|i| top * i as f64 / bins as f64).collect()
}

impl EasinessProfile {
    /// Builds a profile from per-sample class probabilities and true labels.
    pub fn from_predictions(
        probs: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        bins: usize,
        network: &str,
    ) -> Result<Self> {
        if bins < 4 {
            return Err(Error::Easiness(format!("need at least 4 bins, got {bins}")));
        }
        if classes < 2 {
            return Err(Error::Easiness("need at least 2 classes".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::Easiness(format!(
                "{} predictions for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let top = (classes as f64).ln();
        let mut per_class: Vec<ClassProfile> = (0..classes)
            .map(|class| ClassProfile {
                class,
                counts: vec![0.0; bins],
                score: 0.0,
                n: 0,
            })
            .collect();
        for (i, (p, &l)) in probs.iter().zip(labels).enumerate() {
            if p.len() != classes || l >= classes {
                return Err(Error::Easiness(format!(
                    "sample {i}: {} probabilities, label {l}, expected {classes} classes",
                    p.len()
                )));
            }
            let e = sample_entropy(p).map_err(|e| Error::Easiness(format!("sample {i}: {e}")))?;
            let b = ((e / top * bins as f64) as usize).min(bins - 1);
            let c = &mut per_class[l];
            c.counts[b] += 1.0;
            c.score += e;
            c.n += 1;
        }
        let mut warnings = Vec::new();
        for c in &mut per_class {
            if c.n == 0 {
                // nothing observed: rank the class as hardest
                c.score = top;
                warnings.push(format!("class {} has no samples", c.class));
            } else {
                c.score /= c.n as f64;
            }
        }
        let scores: Vec<f64> = per_class.iter().map(|c| c.score).collect();
        Ok(EasinessProfile {
            classes,
            bins: bin_edges(classes, bins),
            per_class,
            ranking: rank_classes(&scores),
            networks: vec![network.to_string()],
            warnings,
        })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.per_class.iter().map(|c| c.score).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: EasinessProfile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut seen = vec![false; p.classes];
        for &c in &p.ranking {
            if c >= p.classes || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Easiness(
                    "ranking is not a permutation of the classes".into(),
                ));
            }
        }
        if p.ranking.len() != p.classes || p.per_class.len() != p.classes {
            return Err(Error::Easiness("profile does not cover every class".into()));
        }
        Ok(p)
    }
}

/// Elementwise mean of histograms and scores; the ranking is recomputed.
pub fn aggregate_profiles(profiles: &[EasinessProfile]) -> Result<EasinessProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Easiness("no profiles to aggregate".into()))?;
    for p in &profiles[1..] {
        if p.classes != first.classes || p.bins != first.bins {
            return Err(Error::Easiness(format!(
                "profiles disagree: {} classes / {} edges vs {} classes / {} edges",
                first.classes,
                first.bins.len(),
                p.classes,
                p.bins.len()
            )));
        }
    }
    let m = profiles.len() as f64;
    let per_class: Vec<ClassProfile> = (0..first.classes)
        .map(|c| {
            let mut counts = vec![0.0; first.bins.len() - 1];
            let mut score = 0.0;
            for p in profiles {
                for (acc, v) in counts.iter_mut().zip(&p.per_class[c].counts) {
                    *acc += v;
                }
                score += p.per_class[c].score;
            }
            counts.iter_mut().for_each(|v| *v /= m);
            ClassProfile {
                class: c,
                counts,
                score: score / m,
                n: first.per_class[c].n,
            }
        })
        .collect();
    let scores: Vec<f64> = per_class.iter().map(|c| c.score).collect();
    Ok(EasinessProfile {
        classes: first.classes,
        bins: first.bins.clone(),
        per_class,
        ranking: rank_classes(&scores),
        networks: profiles.iter().flat_map(|p| p.networks.clone()).collect(),
        warnings: profiles.iter().flat_map(|p| p.warnings.clone()).collect(),
    })
}

/// Entry `(i, j)` counts samples of class `order[i]` predicted as `order[j]`.
pub fn confusion_matrix(probs: &[Vec<f64>], labels: &[usize], order: &[usize]) -> Vec<Vec<u64>> {
    let k = order.len();
    let mut pos = vec![usize::MAX; k];
    for (i, &c) in order.iter().enumerate() {
        if c < k {
            pos[c] = i;
        }
    }
    let mut m = vec![vec![0u64; k]; k];
    for (p, &l) in probs.iter().zip(labels) {
        let pred = train::argmax(p);
        if l < k && pred < k {
            m[pos[l]][pos[pred]] += 1;
        }
    }
    m
}

/// Evaluates a trained classifier on every sample of `data`.
pub fn profile_network<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    bins: usize,
    network: &str,
) -> Result<EasinessProfile> {
    let probs = train::predict_probs(model, data)?;
    let mut p = EasinessProfile::from_predictions(&probs, data.labels(), data.num_classes(), bins, network)?;
    let correct = probs
        .iter()
        .zip(data.labels())
        .filter(|(q, l)| train::argmax(q) == **l)
        .count();
    let acc = correct as f64 / data.len().max(1) as f64;
    let chance = 1.0 / data.num_classes() as f64;
    if acc <= chance + 0.05 {
        p.warnings.push(format!(
            "network {network} looks untrained: accuracy {acc:.3} vs chance {chance:.3}"
        ));
    }
    Ok(p)
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|x, y| v[*x].total_cmp(&v[*y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Reads `sample_id,true_label,p_0,...,p_{K-1}` rows (header optional).
pub fn read_prediction_log(path: impl AsRef<Path>) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let label = match rec.get(1).map(|s| s.trim().parse::<usize>()) {
            Some(Ok(l)) => l,
            _ if line == 0 => continue,
            _ => {
                return Err(Error::Easiness(format!(
                    "{}: line {}: bad true_label",
                    path.display(),
                    line + 1
                )))
            }
        };
        let p = rec
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Easiness(format!("{}: line {}: {e}", path.display(), line + 1)))?;
        probs.push(p);
        labels.push(label);
    }
    Ok((probs, labels))
}

/// Small fixed CNNs of increasing depth used as reference classifiers.
pub const REFERENCE_NETS: usize = 3;

pub fn reference_net(variant: usize, input: [usize; 3], classes: usize, seed: u64) -> Result<StandaloneNet> {
    let ir = |e| BlockSpec::InvertedResidual { expand: e };
    let (stages, layers) = match variant % REFERENCE_NETS {
        0 => (vec![Stage(1, 16, 2)], vec![(ir(1), OperatorSpec::depthwise(3))]),
        1 => (
            vec![Stage(1, 16, 2), Stage(1, 32, 2)],
            vec![(ir(3), OperatorSpec::depthwise(3)); 2],
        ),
        _ => (
            vec![Stage(2, 16, 2), Stage(1, 32, 2)],
            vec![
                (ir(3), OperatorSpec::depthwise(5)),
                (ir(1), OperatorSpec::full(3)),
                (ir(3), OperatorSpec::depthwise(3)),
            ],
        ),
    };
    let scaffold = Scaffold::new(input, 8, stages, classes)?;
    let mut rng = seed::Rng::seed_from_u64(seed::derive(seed, 100 + variant as u64));
    StandaloneNet::build(scaffold, &layers, &mut rng)
}

/// Reference net `variant` trained on `data`.
pub fn train_reference(data: &Dataset, variant: usize, epochs: usize, seed: u64) -> Result<StandaloneNet> {
    let mut net = reference_net(variant, data.sample_shape(), data.num_classes(), seed)?;
    let cfg = FitConfig {
        epochs,
        batch_size: 32,
        lr: 0.05,
        seed: seed::derive(seed, Stream::Reference as u64 * 1000 + variant as u64),
        ..FitConfig::default()
    };
    train::fit(&mut net, data, &cfg)?;
    Ok(net)
}

/// Trains reference net `variant` on `data` and profiles it.
pub fn profile_with_reference(
    data: &Dataset,
    variant: usize,
    epochs: usize,
    bins: usize,
    seed: u64,
) -> Result<EasinessProfile> {
    let net = train_reference(data, variant, epochs, seed)?;
    profile_network(&net, data, bins, &format!("ref{variant}"))
}
