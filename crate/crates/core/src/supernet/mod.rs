//! Over-parameterized network: every searchable layer mixes all alive
//! (block, operator) candidates with Gumbel-Softmax weights.

pub mod cost;
pub mod descriptor;
pub mod grid;
pub mod gumbel;

use prunas_tensor::{BatchStats, Tensor, Var};
use rand::Rng;

pub use cost::{cost_penalty, cost_penalty_grad, CostTable, PENALTY_FLOOR};
pub use descriptor::{ArchDescriptor, LayerChoice};
pub use grid::{argmax_alive, prune_count, ranked, ArchParams, CandidateGrid};
pub use gumbel::{gumbel_noise, gumbel_sample, gumbel_softmax, gumbel_softmax_var};

use crate::error::{Error, Result};
use crate::nn::network::split_indexed;
use crate::nn::{Backbone, Block, ForwardCtx, Scaffold, SpaceSpec};

#[derive(Clone, Debug)]
pub struct Supernet {
    pub backbone: Backbone,
    pub grid: CandidateGrid,
    pub arch: ArchParams,
    pub costs: CostTable,
    /// `blocks[l][j]`, `None` once candidate `j` of layer `l` is pruned.
    blocks: Vec<Vec<Option<Block>>>,
}

impl Supernet {
    pub fn build<R: Rng + ?Sized>(
        space: &SpaceSpec,
        scaffold: Scaffold,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        space.validate()?;
        if !(tau > 0.0) {
            return Err(Error::config(
                "tau",
                format!("temperature must be positive, got {tau}"),
            ));
        }
        let candidates = space.candidates();
        let slots = scaffold.slots();
        let backbone = Backbone::new(scaffold, rng);
        let mut blocks = Vec::with_capacity(slots.len());
        let mut layer_costs = Vec::with_capacity(slots.len());
        for slot in &slots {
            let mut row = Vec::with_capacity(candidates.len());
            let mut costs = Vec::with_capacity(candidates.len());
            for (b, o) in &candidates {
                let block = Block::build(*b, *o, slot.c_in, slot.c_out, slot.stride, rng)?;
                costs.push(block.flops(slot.input)?);
                row.push(Some(block));
            }
            blocks.push(row);
            layer_costs.push(costs);
        }
        let costs = CostTable {
            layers: layer_costs,
            fixed: backbone.scaffold.fixed_flops(),
        };
        Ok(Supernet {
            grid: CandidateGrid::new(candidates.clone(), slots.len())?,
            arch: ArchParams::zeros(slots.len(), candidates.len(), tau),
            costs,
            backbone,
            blocks,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn scaffold(&self) -> &Scaffold {
        &self.backbone.scaffold
    }

    pub fn candidate(&self, layer: usize, j: usize) -> Option<&Block> {
        self.blocks.get(layer)?.get(j)?.as_ref()
    }

    /// Logits over classes. `p[l]` holds one weight per alive candidate of
    /// layer `l`, in declaration order; pruned candidates are not evaluated.
    pub fn forward(&self, ctx: &mut ForwardCtx, x: Var, p: &[Var]) -> Result<Var> {
        if p.len() != self.layers() {
            return Err(Error::Shape(format!(
                "{} mixture vectors for {} layers",
                p.len(),
                self.layers()
            )));
        }
        let mut h = self.backbone.stem(ctx, x)?;
        for (l, pl) in p.iter().enumerate() {
            let alive = self.grid.alive(l);
            let n = ctx.graph.value(*pl).numel();
            if n != alive.len() {
                return Err(Error::Shape(format!(
                    "layer {l}: {n} mixture weights for {} alive candidates",
                    alive.len()
                )));
            }
            let mut acc: Option<Var> = None;
            for (k, &j) in alive.iter().enumerate() {
                let block = self.blocks[l][j].as_ref().ok_or_else(|| {
                    Error::Invalid(format!("layer {l} candidate {j} is alive but has no weights"))
                })?;
                let y = block.forward(ctx, &format!("l{l}.c{j}."), h)?;
                let w = ctx.graph.index(*pl, k)?;
                let term = ctx.graph.scalar_mul(y, w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => ctx.graph.add(a, term)?,
                });
            }
            h = acc.ok_or_else(|| Error::Invalid(format!("layer {l} has no alive candidate")))?;
        }
        self.backbone.head(ctx, h)
    }

    /// Constant mixture-weight vars for the given values.
    pub fn constant_mixture(&self, ctx: &mut ForwardCtx, p: &[Vec<f64>]) -> Vec<Var> {
        p.iter()
            .map(|pl| ctx.graph.constant(Tensor::from_vec(pl.clone())))
            .collect()
    }

    /// One Gumbel draw per layer over the alive candidates.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        self.grid
            .alive_counts()
            .into_iter()
            .map(|n| gumbel_noise(n, rng))
            .collect()
    }

    /// Mixture weights for the given noise at the current logits.
    pub fn mixture(&self, noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        (0..self.layers())
            .map(|l| gumbel_softmax(&self.arch.alive_logits(&self.grid, l), self.arch.tau, &noise[l]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .backbone
            .params
            .params_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        for (l, row) in self.blocks.iter_mut().enumerate() {
            for (j, b) in row.iter_mut().enumerate() {
                if let Some(b) = b {
                    out.extend(b.params.params_mut().map(|(n, t)| (format!("l{l}.c{j}.{n}"), t)));
                }
            }
        }
        out
    }

    pub fn update_norm(&mut self, full_name: &str, stats: &BatchStats) {
        let Some((l, rest)) = split_indexed(full_name, "l") else {
            self.backbone.params.update_running(full_name, stats);
            return;
        };
        if let Some((j, local)) = split_indexed(rest, "c") {
            if let Some(Some(b)) = self.blocks.get_mut(l).and_then(|r| r.get_mut(j)) {
                b.params.update_running(local, stats);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.params.param_count()
            + self
                .blocks
                .iter()
                .flatten()
                .flatten()
                .map(Block::param_count)
                .sum::<usize>()
    }

    /// Prunes every layer and drops the weights of removed candidates.
    pub fn prune(&mut self, ratio: f64, final_step: bool) -> Result<Vec<Vec<usize>>> {
        let killed = grid::prune(&mut self.grid, &self.arch, ratio, final_step)?;
        for (l, dead) in killed.iter().enumerate() {
            for &j in dead {
                self.blocks[l][j] = None;
            }
        }
        Ok(killed)
    }

    /// Argmax alive candidate of every layer.
    pub fn choices(&self) -> Vec<usize> {
        (0..self.layers())
            .map(|l| {
                argmax_alive(&self.arch.logits[l], &self.grid.alive(l))
                    .expect("every layer keeps an alive candidate")
            })
            .collect()
    }

    pub fn derive(&self, seed: u64, config_hash: &str) -> Result<ArchDescriptor> {
        let choice = self.choices();
        Ok(ArchDescriptor {
            layers: choice
                .iter()
                .map(|&j| {
                    let (block, op) = self.grid.candidates[j];
                    LayerChoice { block, op }
                })
                .collect(),
            flops: self.costs.single_path(&choice)?,
            ref_input: self.scaffold().input,
            seed,
            config_hash: config_hash.to_string(),
            logits: self.arch.logits.clone(),
            scaffold: self.scaffold().clone(),
        })
    }
}
