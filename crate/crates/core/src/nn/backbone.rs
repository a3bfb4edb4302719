use prunas_tensor::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::strided;
use super::layers::{ConvUnit, ForwardCtx, ParamStore};
use super::spec::Stage;
use crate::error::{Error, Result};

/// Fixed stem and head around a list of searchable slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scaffold {
    /// Reference input shape `[C, H, W]`; costs are measured at this size.
    pub input: [usize; 3],
    pub stem: usize,
    pub stages: Vec<Stage>,
    pub classes: usize,
}

/// One searchable layer position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub index: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    /// Input shape `[C, H, W]` at the reference resolution.
    pub input: [usize; 3],
}

impl Scaffold {
    pub fn new(input: [usize; 3], stem: usize, stages: Vec<Stage>, classes: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Invalid("empty stage layout".into()));
        }
        if let Some(s) = stages
            .iter()
            .find(|s| s.layers() == 0 || s.channels() == 0 || !matches!(s.stride(), 1 | 2))
        {
            return Err(Error::Invalid(format!(
                "bad stage {:?}: need layers > 0, channels > 0, stride 1 or 2",
                (s.0, s.1, s.2)
            )));
        }
        if stem == 0 || classes < 2 || input.contains(&0) {
            return Err(Error::Invalid(format!(
                "bad scaffold: stem {stem}, classes {classes}, input {input:?}"
            )));
        }
        Ok(Scaffold {
            input,
            stem,
            stages,
            classes,
        })
    }

    pub fn stem_unit(&self) -> ConvUnit {
        ConvUnit::new("stem", self.input[0], self.stem, 3, 2, 1)
    }

    pub fn slots(&self) -> Vec<Slot> {
        let [_, mut h, mut w] = self.input;
        h = strided(h, 2);
        w = strided(w, 2);
        let mut c = self.stem;
        let mut out = Vec::new();
        for stage in &self.stages {
            for i in 0..stage.layers() {
                let stride = if i == 0 { stage.stride() } else { 1 };
                out.push(Slot {
                    index: out.len(),
                    c_in: c,
                    c_out: stage.channels(),
                    stride,
                    input: [c, h, w],
                });
                c = stage.channels();
                h = strided(h, stride);
                w = strided(w, stride);
            }
        }
        out
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.stem, |s| s.channels())
    }

    pub fn stem_flops(&self) -> u64 {
        self.stem_unit()
            .flops(self.input)
            .expect("stem geometry is valid by construction")
    }

    pub fn head_flops(&self) -> u64 {
        2 * (self.feature_channels() * self.classes) as u64
    }

    /// Cost of everything outside the searchable slots.
    pub fn fixed_flops(&self) -> u64 {
        self.stem_flops() + self.head_flops()
    }
}

/// Parameters of the stem convolution and the linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub scaffold: Scaffold,
    pub params: ParamStore,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(scaffold: Scaffold, rng: &mut R) -> Self {
        let mut params = ParamStore::default();
        scaffold.stem_unit().init(&mut params, rng);
        let c = scaffold.feature_channels();
        params.insert(
            "head.w",
            Tensor::randn(&[c, scaffold.classes], (1.0 / c as f64).sqrt(), rng),
        );
        params.insert("head.b", Tensor::zeros(&[scaffold.classes]));
        Backbone { scaffold, params }
    }

    pub fn stem(&self, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x);
        if shape.len() != 4 || shape[1..] != self.scaffold.input[..] {
            return Err(Error::Shape(format!(
                "network expects [N, {}, {}, {}] input, got {:?}",
                self.scaffold.input[0], self.scaffold.input[1], self.scaffold.input[2], shape
            )));
        }
        self.scaffold.stem_unit().forward(ctx, &self.params, "", x)
    }

    /// Pooling and linear classifier; returns logits `[N, classes]`.
    pub fn head(&self, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let pooled = ctx.graph.global_avg_pool(x)?;
        let w = ctx.bind("head.w".into(), self.params.get("head.w")?);
        let b = ctx.bind("head.b".into(), self.params.get("head.b")?);
        let z = ctx.graph.matmul(pooled, w)?;
        Ok(ctx.graph.add(z, b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_counts() {
        let one = Scaffold::new([1, 16, 16], 8, vec![Stage(1, 16, 1)], 10).unwrap();
        assert_eq!(one.slots().len(), 1);
        let desk = Scaffold::new([1, 16, 16], 8, vec![Stage(2, 16, 2), Stage(2, 32, 2)], 10).unwrap();
        let slots = desk.slots();
        assert_eq!(slots.len(), 4);
        assert_eq!(slots[0].input, [8, 8, 8]);
        assert_eq!((slots[0].c_out, slots[0].stride), (16, 2));
        assert_eq!(slots[1].input, [16, 4, 4]);
        assert_eq!(slots[2].input, [16, 4, 4]);
        assert_eq!(slots[3].input, [32, 2, 2]);
    }

    #[test]
    fn empty_layout_rejected() {
        assert!(Scaffold::new([1, 8, 8], 8, vec![], 10).is_err());
        assert!(Scaffold::new([1, 8, 8], 8, vec![Stage(0, 8, 1)], 10).is_err());
    }

    #[test]
    fn fixed_costs() {
        let s = Scaffold::new([1, 16, 16], 8, vec![Stage(1, 16, 1)], 10).unwrap();
        // 3x3 conv, 1 -> 8 channels, 8x8 output
        assert_eq!(s.stem_flops(), 2 * 8 * 9 * 64);
        assert_eq!(s.head_flops(), 2 * 16 * 10);
    }
}
