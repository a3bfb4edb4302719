//! Declarative descriptions of blocks, operators and search spaces.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Depthwise,
    Full,
}

/// The inner convolution of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: OpKind,
    pub kernel: usize,
}

impl OperatorSpec {
    pub const fn depthwise(kernel: usize) -> Self {
        OperatorSpec {
            kind: OpKind::Depthwise,
            kernel,
        }
    }

    pub const fn full(kernel: usize) -> Self {
        OperatorSpec {
            kind: OpKind::Full,
            kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.kernel, 3 | 5 | 7) {
            return Err(Error::Space(format!(
                "operator kernel must be 3, 5 or 7, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Group count for a convolution over `channels` channels.
    pub fn groups(&self, channels: usize) -> usize {
        match self.kind {
            OpKind::Depthwise => channels,
            OpKind::Full => 1,
        }
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            OpKind::Depthwise => "dw",
            OpKind::Full => "conv",
        };
        write!(f, "{k}{}x{}", self.kernel, self.kernel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    Short,
    Long,
}

impl Depth {
    /// Number of k x k convolutions in the shuffle branch.
    pub fn convs(self) -> usize {
        match self {
            Depth::Short => 1,
            Depth::Long => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BlockSpec {
    InvertedResidual {
        expand: usize,
    },
    Shuffle {
        depth: Depth,
    },
    Skip,
    /// Outputs zeros; has no parameters and no cost.
    Zero,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BlockSpec::InvertedResidual { expand } if expand == 0 => Err(Error::Space(
                "inverted residual expand factor must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSpec::InvertedResidual { expand } => write!(f, "ir{expand}"),
            BlockSpec::Shuffle { depth: Depth::Short } => write!(f, "shuffle-short"),
            BlockSpec::Shuffle { depth: Depth::Long } => write!(f, "shuffle-long"),
            BlockSpec::Skip => write!(f, "skip"),
            BlockSpec::Zero => write!(f, "zero"),
        }
    }
}

/// One searchable stage: `(layers, channels, stride of the first layer)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage(pub usize, pub usize, pub usize);

impl Stage {
    pub fn layers(&self) -> usize {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.1
    }

    pub fn stride(&self) -> usize {
        self.2
    }
}

pub const DEFAULT_STEM: usize = 8;

pub fn default_stages() -> Vec<Stage> {
    vec![Stage(2, 16, 2), Stage(2, 32, 2)]
}

fn default_stem() -> usize {
    DEFAULT_STEM
}

/// Block set, operator set and macro layout of a search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub blocks: Vec<BlockSpec>,
    pub operators: Vec<OperatorSpec>,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default = "default_stem")]
    pub stem: usize,
}

pub const PRESETS: [&str; 5] = ["mobile", "shuffle", "mobile+", "shuffle+", "shuffle+mobile"];

fn ir_blocks() -> Vec<BlockSpec> {
    [1, 3, 6]
        .into_iter()
        .map(|expand| BlockSpec::InvertedResidual { expand })
        .collect()
}

fn shuffle_blocks() -> Vec<BlockSpec> {
    vec![
        BlockSpec::Shuffle { depth: Depth::Short },
        BlockSpec::Shuffle { depth: Depth::Long },
    ]
}

impl SpaceSpec {
    pub fn new(blocks: Vec<BlockSpec>, operators: Vec<OperatorSpec>) -> Self {
        SpaceSpec {
            blocks,
            operators,
            stages: default_stages(),
            stem: DEFAULT_STEM,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        use OperatorSpec as O;
        let (blocks, operators) = match name {
            "mobile" => (ir_blocks(), vec![O::depthwise(3), O::depthwise(5)]),
            "shuffle" => (
                shuffle_blocks(),
                vec![O::depthwise(3), O::depthwise(5), O::depthwise(7)],
            ),
            "mobile+" => (
                ir_blocks(),
                vec![O::depthwise(3), O::depthwise(5), O::full(3), O::full(5)],
            ),
            "shuffle+" => (
                shuffle_blocks(),
                vec![
                    O::depthwise(3),
                    O::depthwise(5),
                    O::depthwise(7),
                    O::full(3),
                    O::full(5),
                ],
            ),
            "shuffle+mobile" => {
                let mut b = ir_blocks();
                b.extend(shuffle_blocks());
                (b, vec![O::depthwise(3), O::depthwise(5), O::depthwise(7)])
            }
            other => {
                return Err(Error::Space(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(SpaceSpec::new(blocks, operators))
    }

    pub fn with_stages(mut self, stem: usize, stages: Vec<Stage>) -> Self {
        self.stem = stem;
        self.stages = stages;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Space("empty block set".into()));
        }
        if self.operators.is_empty() {
            return Err(Error::Space("empty operator set".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        for o in &self.operators {
            o.validate()?;
        }
        Ok(())
    }

    /// Every (block, operator) pair, blocks outermost.
    pub fn candidates(&self) -> Vec<(BlockSpec, OperatorSpec)> {
        let mut out = Vec::with_capacity(self.blocks.len() * self.operators.len());
        for b in &self.blocks {
            for o in &self.operators {
                out.push((*b, *o));
            }
        }
        out
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let s: SpaceSpec = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }
}
