use prunas_tensor::{BatchStats, Tensor, Var};
use rand::Rng;

use super::backbone::{Backbone, Scaffold};
use super::block::Block;
use super::layers::ForwardCtx;
use super::spec::{BlockSpec, OperatorSpec};
use crate::error::{Error, Result};

/// Anything trainable that maps an image batch to class logits.
pub trait Model {
    fn scaffold(&self) -> &Scaffold;

    fn forward(&self, ctx: &mut ForwardCtx, x: Var) -> Result<Var>;

    /// Every weight tensor with its fully qualified name.
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Folds one batch's normalization statistics into the running averages.
    fn update_norm(&mut self, full_name: &str, stats: &BatchStats);

    fn param_count(&self) -> usize;
}

/// Splits `"b3.mid.bn"` into `(3, "mid.bn")` for the given prefix letter.
pub(crate) fn split_indexed<'a>(name: &'a str, tag: &str) -> Option<(usize, &'a str)> {
    let rest = name.strip_prefix(tag)?;
    let (idx, local) = rest.split_once('.')?;
    Some((idx.parse().ok()?, local))
}

/// A single-path network: one fixed block per slot.
#[derive(Clone, Debug)]
pub struct StandaloneNet {
    pub backbone: Backbone,
    pub layers: Vec<(BlockSpec, OperatorSpec)>,
    pub blocks: Vec<Block>,
}

impl StandaloneNet {
    pub fn build<R: Rng + ?Sized>(
        scaffold: Scaffold,
        layers: &[(BlockSpec, OperatorSpec)],
        rng: &mut R,
    ) -> Result<Self> {
        let slots = scaffold.slots();
        if slots.len() != layers.len() {
            return Err(Error::Shape(format!(
                "architecture has {} layers, scaffold has {} slots",
                layers.len(),
                slots.len()
            )));
        }
        let backbone = Backbone::new(scaffold, rng);
        let blocks = slots
            .iter()
            .zip(layers)
            .map(|(s, (b, o))| Block::build(*b, *o, s.c_in, s.c_out, s.stride, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(StandaloneNet {
            backbone,
            layers: layers.to_vec(),
            blocks,
        })
    }

    pub fn flops(&self) -> Result<u64> {
        let mut total = self.backbone.scaffold.fixed_flops();
        for (slot, b) in self.backbone.scaffold.slots().iter().zip(&self.blocks) {
            total += b.flops(slot.input)?;
        }
        Ok(total)
    }

    /// All weights, stem and head included, as checkpoint entries.
    pub fn entries(&mut self) -> Vec<(String, Tensor)> {
        self.params_mut()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}

impl Model for StandaloneNet {
    fn scaffold(&self) -> &Scaffold {
        &self.backbone.scaffold
    }

    fn forward(&self, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let mut h = self.backbone.stem(ctx, x)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(ctx, &format!("b{i}."), h)?;
        }
        self.backbone.head(ctx, h)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .backbone
            .params
            .params_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.params.params_mut().map(|(n, t)| (format!("b{i}.{n}"), t)));
        }
        out
    }

    fn update_norm(&mut self, full_name: &str, stats: &BatchStats) {
        match split_indexed(full_name, "b") {
            Some((i, local)) if i < self.blocks.len() => self.blocks[i].params.update_running(local, stats),
            _ => self.backbone.params.update_running(full_name, stats),
        }
    }

    fn param_count(&self) -> usize {
        self.backbone.params.param_count() + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_names() {
        assert_eq!(split_indexed("b3.mid.bn", "b"), Some((3, "mid.bn")));
        assert_eq!(split_indexed("stem.bn", "b"), None);
        assert_eq!(split_indexed("l2.c5.expand.w", "l"), Some((2, "c5.expand.w")));
    }
}
