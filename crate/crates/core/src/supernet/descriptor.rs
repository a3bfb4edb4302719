use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockSpec, OperatorSpec, Scaffold, StandaloneNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerChoice {
    pub block: BlockSpec,
    pub op: OperatorSpec,
}

/// A derived single-path architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub layers: Vec<LayerChoice>,
    /// FLOPs per sample at `ref_input`, stem and head included.
    pub flops: u64,
    pub ref_input: [usize; 3],
    pub seed: u64,
    pub config_hash: String,
    /// Final logits of every candidate, per layer.
    pub logits: Vec<Vec<f64>>,
    pub scaffold: Scaffold,
}

impl ArchDescriptor {
    pub fn pairs(&self) -> Vec<(BlockSpec, OperatorSpec)> {
        self.layers.iter().map(|c| (c.block, c.op)).collect()
    }

    /// Builds the stand-alone network with freshly initialized weights.
    pub fn build<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<StandaloneNet> {
        StandaloneNet::build(self.scaffold.clone(), &self.pairs(), rng)
    }

    /// Recomputes the FLOPs of the described network.
    pub fn compute_flops(&self) -> Result<u64> {
        let mut rng = crate::seed::Rng::seed_from_u64(0);
        self.build(&mut rng)?.flops()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let d: ArchDescriptor = serde_json::from_str(&text)?;
        if d.layers.len() != d.scaffold.slots().len() {
            return Err(Error::Shape(format!(
                "descriptor lists {} layers for a scaffold with {} slots",
                d.layers.len(),
                d.scaffold.slots().len()
            )));
        }
        Ok(d)
    }
}
