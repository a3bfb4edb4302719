//! Synthetic images with a planted per-class difficulty.
//!
//! Class `c` is a Gaussian blob on a ring around the image centre, at angle
//! `2 pi c / K`. Each sample moves the blob along the ring by a normal
//! offset of `sigma[c]` class spacings and adds faint pixel noise, so a
//! larger `sigma` spreads a class over its neighbours' positions.

use std::f64::consts::PI;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

const BLOB_WIDTH: f64 = 1.5;
const RING_RADIUS: f64 = 0.3;
const PIXEL_NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub sigma: Vec<f64>,
    pub image_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// `classes` classes with noise scales evenly spaced from `lo` to `hi`.
    pub fn ascending(
        classes: usize,
        per_class: usize,
        lo: f64,
        hi: f64,
        image_size: usize,
        seed: u64,
    ) -> Self {
        let sigma = (0..classes)
            .map(|c| lo + (hi - lo) * c as f64 / (classes.max(2) - 1) as f64)
            .collect();
        SynthSpec {
            classes,
            per_class,
            sigma,
            image_size,
            seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: SynthSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.sigma.len() != self.classes {
            return Err(Error::config(
                "sigma",
                format!("{} values for {} classes", self.sigma.len(), self.classes),
            ));
        }
        if let Some((c, s)) = self
            .sigma
            .iter()
            .enumerate()
            .find(|(_, s)| !(**s > 0.0) || !s.is_finite())
        {
            return Err(Error::config(
                "sigma",
                format!("class {c} has non-positive sigma {s}"),
            ));
        }
        if self.per_class == 0 {
            return Err(Error::config("per_class", "must be positive"));
        }
        if self.image_size < 4 {
            return Err(Error::config("image_size", "must be at least 4"));
        }
        Ok(())
    }

    fn spacing(&self) -> f64 {
        2.0 * PI / self.classes as f64
    }

    /// Noise-free template of class `c`.
    pub fn template(&self, c: usize) -> Vec<f64> {
        self.blob(self.spacing() * c as f64)
    }

    fn blob(&self, theta: f64) -> Vec<f64> {
        let s = self.image_size as f64;
        let centre = (s - 1.0) / 2.0;
        let (cy, cx) = (
            centre + RING_RADIUS * s * theta.sin(),
            centre + RING_RADIUS * s * theta.cos(),
        );
        let mut out = Vec::with_capacity(self.image_size * self.image_size);
        for y in 0..self.image_size {
            for x in 0..self.image_size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out.push((-d2 / (2.0 * BLOB_WIDTH * BLOB_WIDTH)).exp());
            }
        }
        out
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = seed::stream(self.seed, Stream::Synth);
        let per = self.image_size * self.image_size;
        let mut images = Vec::with_capacity(self.classes * self.per_class * per);
        let mut labels = Vec::with_capacity(self.classes * self.per_class);
        for c in 0..self.classes {
            for _ in 0..self.per_class {
                let shift: f64 = StandardNormal.sample(&mut rng);
                let theta = self.spacing() * (c as f64 + self.sigma[c] * shift);
                for v in self.blob(theta) {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    images.push(v + PIXEL_NOISE * e);
                }
                labels.push(c);
            }
        }
        Dataset::new(
            images,
            [1, self.image_size, self.image_size],
            labels,
            self.classes,
            Provenance {
                source: "synthetic".into(),
                seed: Some(self.seed),
                notes: vec![format!("sigma={:?}", self.sigma)],
                ..Provenance::default()
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let s = SynthSpec::ascending(3, 4, 0.1, 1.0, 8, 9);
        assert_eq!(s.generate().unwrap(), s.generate().unwrap());
        let mut other = s.clone();
        other.seed = 10;
        assert_ne!(s.generate().unwrap().images(), other.generate().unwrap().images());
    }

    #[test]
    fn rejects_bad_sigma() {
        let mut s = SynthSpec::ascending(3, 4, 0.1, 1.0, 8, 9);
        s.sigma[1] = 0.0;
        assert!(matches!(s.generate(), Err(Error::Config { .. })));
        s.sigma.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn templates_are_distinct_blobs() {
        let s = SynthSpec::ascending(10, 1, 0.1, 1.0, 12, 0);
        let a = s.template(0);
        let b = s.template(5);
        let peak = a.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.5);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum();
        assert!(dot < 0.1 * na);
    }
}
