use std::path::Path;

use prunas_tensor::{checkpoint, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Where a dataset came from and how it was transformed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    /// Per-channel statistics used for standardization (empty if none).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `label_map[new] = original label` after class subsetting.
    pub label_map: Option<Vec<usize>>,
    pub notes: Vec<String>,
}

/// Labelled images stored contiguously as `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    sample_shape: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    pub provenance: Provenance,
}

/// Disjoint training and validation parts of one dataset.
#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: Dataset,
    pub val: Dataset,
    pub per_class_val: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        sample_shape: [usize; 3],
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(Error::Data(format!(
                "sample shape {sample_shape:?} has a zero dimension"
            )));
        }
        if images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} values for {} samples of shape {:?}",
                images.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l >= num_classes) {
            return Err(Error::Data(format!(
                "sample {i} has label {l}, but only {num_classes} classes are declared"
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite pixel value".into()));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, l) in labels.iter().enumerate() {
            class_index[*l].push(i);
        }
        Ok(Dataset {
            images,
            sample_shape,
            labels,
            num_classes,
            class_index,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.class_index.iter().map(Vec::len).collect()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_numel();
        &self.images[i * per..(i + 1) * per]
    }

    fn sample_numel(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stacks the given samples into an `[n, C, H, W]` tensor plus labels.
    pub fn batch(&self, ids: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if ids.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * self.sample_numel());
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape;
        Ok((Tensor::new(vec![ids.len(), c, h, w], data)?, labels))
    }

    /// Keeps the samples at the given positions, with labels unchanged.
    pub fn select(&self, ids: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(ids.len() * self.sample_numel());
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            images.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            images,
            self.sample_shape,
            labels,
            self.num_classes,
            self.provenance.clone(),
        )
    }

    /// Keeps only the listed classes and relabels them `0..ids.len()` in the
    /// given order.
    pub fn subset_by_classes(&self, ids: &[usize]) -> Result<Dataset> {
        let mut new_label = vec![None; self.num_classes];
        for (new, &c) in ids.iter().enumerate() {
            if c >= self.num_classes {
                return Err(Error::Data(format!(
                    "unknown class id {c} (dataset has {} classes)",
                    self.num_classes
                )));
            }
            if new_label[c].is_some() {
                return Err(Error::Data(format!("class id {c} listed twice")));
            }
            new_label[c] = Some(new);
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(n) = new_label[*l] {
                images.extend_from_slice(self.sample(i));
                labels.push(n);
            }
        }
        let mut provenance = self.provenance.clone();
        provenance.label_map = Some(ids.iter().map(|&c| self.original_label(c)).collect());
        Dataset::new(images, self.sample_shape, labels, ids.len(), provenance)
    }

    /// Label in the dataset this one was (possibly repeatedly) subset from.
    pub fn original_label(&self, label: usize) -> usize {
        match &self.provenance.label_map {
            Some(map) => map[label],
            None => label,
        }
    }

    /// Draws `per_class_val` validation samples uniformly from each class.
    pub fn split_train_val(&self, per_class_val: usize, seed: u64) -> Result<SplitPair> {
        let mut rng = seed::stream(seed, Stream::Split);
        let mut val_ids = Vec::new();
        for (c, members) in self.class_index.iter().enumerate() {
            if per_class_val == 0 {
                break;
            }
            if !members.is_empty() && members.len() <= per_class_val {
                return Err(Error::Data(format!(
                    "class {} has {} samples, needs more than {per_class_val} to hold out validation",
                    self.original_label(c),
                    members.len()
                )));
            }
            let mut m = members.clone();
            m.shuffle(&mut rng);
            val_ids.extend_from_slice(&m[..per_class_val.min(m.len())]);
        }
        val_ids.sort_unstable();
        let mut in_val = vec![false; self.len()];
        for &i in &val_ids {
            in_val[i] = true;
        }
        let train_ids: Vec<usize> = (0..self.len()).filter(|i| !in_val[*i]).collect();
        Ok(SplitPair {
            train: self.select(&train_ids)?,
            val: self.select(&val_ids)?,
            per_class_val,
        })
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let [c, h, w] = self.sample_shape;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for s in 0..self.len() {
            for ch in 0..c {
                let start = (s * c + ch) * hw;
                for v in &self.images[start..start + hw] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.len() * hw).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                (s / n - *m * *m).max(0.0).sqrt()
            })
            .collect();
        (mean, std)
    }

    /// Standardizes every channel to zero mean and unit variance, recording
    /// the statistics in the provenance.
    pub fn standardize(&mut self) {
        let (mean, std) = self.channel_stats();
        let [c, h, w] = self.sample_shape;
        let hw = h * w;
        for s in 0..self.len() {
            for ch in 0..c {
                let d = if std[ch] > 0.0 { std[ch] } else { 1.0 };
                let start = (s * c + ch) * hw;
                for v in &mut self.images[start..start + hw] {
                    *v = (*v - mean[ch]) / d;
                }
            }
        }
        self.provenance.mean = mean;
        self.provenance.std = std;
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let [c, h, w] = self.sample_shape;
        let n = self.len();
        let images = if n == 0 {
            Tensor::zeros(&[1])
        } else {
            Tensor::new(vec![n, c, h, w], self.images.clone())?
        };
        let prov = serde_json::to_vec(&self.provenance)?;
        let meta = Tensor::from_vec(vec![
            n as f64,
            c as f64,
            h as f64,
            w as f64,
            self.num_classes as f64,
        ]);
        let entries = vec![
            ("meta".to_string(), meta),
            ("images".to_string(), images),
            (
                "labels".to_string(),
                Tensor::new(
                    vec![n.max(1)],
                    if n == 0 {
                        vec![0.0]
                    } else {
                        self.labels.iter().map(|&l| l as f64).collect()
                    },
                )?,
            ),
            (
                "provenance".to_string(),
                Tensor::new(
                    vec![prov.len().max(1)],
                    if prov.is_empty() {
                        vec![0.0]
                    } else {
                        prov.iter().map(|&b| b as f64).collect()
                    },
                )?,
            ),
        ];
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("dataset checkpoint lacks `{name}`")))
        };
        let meta = get("meta")?.data();
        if meta.len() != 5 {
            return Err(Error::Data("malformed dataset header".into()));
        }
        let [n, c, h, w, k] = [meta[0], meta[1], meta[2], meta[3], meta[4]].map(|v| v as usize);
        let images = if n == 0 {
            Vec::new()
        } else {
            get("images")?.data().to_vec()
        };
        let labels: Vec<usize> = get("labels")?.data()[..n].iter().map(|&v| v as usize).collect();
        let bytes: Vec<u8> = get("provenance")?.data().iter().map(|&v| v as u8).collect();
        let provenance = serde_json::from_slice(&bytes)?;
        Dataset::new(images, [c, h, w], labels, k, provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per: usize) -> Dataset {
        let mut labels = Vec::new();
        let mut images = Vec::new();
        for c in 0..classes {
            for i in 0..per {
                labels.push(c);
                images.extend([c as f64, i as f64, 0.5, -1.0]);
            }
        }
        Dataset::new(images, [1, 2, 2], labels, classes, Provenance::default()).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let d = toy(10, 100);
        let s = d.split_train_val(5, 1).unwrap();
        assert_eq!((s.val.len(), s.train.len()), (50, 950));
        assert!(s.val.class_sizes().iter().all(|&n| n == 5));
        let none = d.split_train_val(0, 1).unwrap();
        assert_eq!(none.train, d);
        assert!(none.val.is_empty());
    }

    #[test]
    fn split_seeds_differ() {
        let d = toy(3, 20);
        let a = d.split_train_val(5, 1).unwrap();
        let b = d.split_train_val(5, 2).unwrap();
        assert_ne!(a.val.images(), b.val.images());
        assert_eq!(a.val.len(), b.val.len());
    }

    #[test]
    fn small_class_named() {
        let d = toy(3, 4);
        let err = d.split_train_val(4, 0).unwrap_err().to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn subset_remaps_and_inverts() {
        let d = toy(10, 7);
        let s = d.subset_by_classes(&[7, 2, 4]).unwrap();
        assert_eq!(s.len(), 21);
        assert_eq!(s.num_classes(), 3);
        let restored: Vec<usize> = s.labels().iter().map(|&l| s.original_label(l)).collect();
        assert!(restored.iter().all(|l| [7, 2, 4].contains(l)));
        // first pixel encodes the original class
        for i in 0..s.len() {
            assert_eq!(s.sample(i)[0] as usize, s.original_label(s.labels()[i]));
        }
        let nested = s.subset_by_classes(&[2, 0]).unwrap();
        assert_eq!(nested.original_label(0), 4);
        assert_eq!(nested.original_label(1), 7);
        assert!(d.subset_by_classes(&[10]).is_err());
    }

    #[test]
    fn label_out_of_range() {
        let e = Dataset::new(vec![0.0; 4], [1, 2, 2], vec![10], 10, Provenance::default());
        assert!(e.is_err());
    }
}
