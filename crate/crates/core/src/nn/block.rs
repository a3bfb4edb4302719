use prunas_tensor::{Tensor, Var};
use rand::Rng;

use super::layers::{ConvUnit, ForwardCtx, ParamStore};
use super::spec::{BlockSpec, OperatorSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Identity,
    Zero,
    Projection(ConvUnit),
    Inverted {
        units: Vec<ConvUnit>,
        residual: bool,
    },
    /// Stride 1, equal widths: the left half passes through.
    ShuffleBasic {
        branch: Vec<ConvUnit>,
    },
    ShuffleDown {
        left: Vec<ConvUnit>,
        right: Vec<ConvUnit>,
    },
}

/// A built candidate: one block family realized with one operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub op: OperatorSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub params: ParamStore,
    layout: Layout,
}

fn chain_forward(
    units: &[ConvUnit],
    ctx: &mut ForwardCtx,
    store: &ParamStore,
    prefix: &str,
    mut x: Var,
) -> Result<Var> {
    for u in units {
        x = u.forward(ctx, store, prefix, x)?;
    }
    Ok(x)
}

fn chain_flops(units: &[ConvUnit], mut shape: [usize; 3]) -> Result<(u64, [usize; 3])> {
    let mut total = 0;
    for u in units {
        total += u.flops(shape)?;
        shape = u.out_shape(shape)?;
    }
    Ok((total, shape))
}

/// Spatial size after a same-padded odd kernel or a 1x1 kernel at `stride`.
pub fn strided(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

/// Convolution units of the shuffle branch: 1x1, one or two k x k, 1x1.
fn shuffle_branch(
    tag: &str,
    op: OperatorSpec,
    c_in: usize,
    width: usize,
    stride: usize,
    depth: usize,
) -> Vec<ConvUnit> {
    let mut units = vec![ConvUnit::new(&format!("{tag}.pw1"), c_in, width, 1, 1, 1)];
    for i in 0..depth {
        let s = if i == 0 { stride } else { 1 };
        units.push(
            ConvUnit::new(
                &format!("{tag}.k{}", i + 1),
                width,
                width,
                op.kernel,
                s,
                op.groups(width),
            )
            .linear(),
        );
    }
    units.push(ConvUnit::new(&format!("{tag}.pw2"), width, width, 1, 1, 1));
    units
}

impl Block {
    pub fn build<R: Rng + ?Sized>(
        spec: BlockSpec,
        op: OperatorSpec,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        op.validate()?;
        if c_in == 0 || c_out == 0 {
            return Err(Error::Block(format!(
                "channels must be positive, got {c_in}->{c_out}"
            )));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::Block(format!("stride must be 1 or 2, got {stride}")));
        }
        let same = stride == 1 && c_in == c_out;
        let layout = match spec {
            BlockSpec::Zero => Layout::Zero,
            BlockSpec::Skip if same => Layout::Identity,
            BlockSpec::Skip => Layout::Projection(ConvUnit::new("proj", c_in, c_out, 1, stride, 1).linear()),
            BlockSpec::InvertedResidual { expand } => {
                let hidden = c_in * expand;
                Layout::Inverted {
                    units: vec![
                        ConvUnit::new("expand", c_in, hidden, 1, 1, 1),
                        ConvUnit::new("mid", hidden, hidden, op.kernel, stride, op.groups(hidden)),
                        ConvUnit::new("project", hidden, c_out, 1, 1, 1).linear(),
                    ],
                    residual: same,
                }
            }
            BlockSpec::Shuffle { depth } => {
                if c_in % 2 != 0 || c_out % 2 != 0 {
                    return Err(Error::Block(format!(
                        "shuffle block needs even channels, got {c_in}->{c_out}"
                    )));
                }
                if same {
                    let half = c_in / 2;
                    Layout::ShuffleBasic {
                        branch: shuffle_branch("r", op, half, half, 1, depth.convs()),
                    }
                } else {
                    let half = c_out / 2;
                    Layout::ShuffleDown {
                        left: vec![
                            ConvUnit::new("l.k1", c_in, c_in, op.kernel, stride, op.groups(c_in)).linear(),
                            ConvUnit::new("l.pw", c_in, half, 1, 1, 1),
                        ],
                        right: shuffle_branch("r", op, c_in, half, stride, depth.convs()),
                    }
                }
            }
        };
        let mut params = ParamStore::default();
        for u in layout_units(&layout) {
            u.init(&mut params, rng);
        }
        Ok(Block {
            spec,
            op,
            c_in,
            c_out,
            stride,
            params,
            layout,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, prefix: &str, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(Error::Shape(format!(
                "{} block expects [N, {}, H, W], got {:?}",
                self.spec, self.c_in, shape
            )));
        }
        let store = &self.params;
        match &self.layout {
            Layout::Identity => Ok(x),
            Layout::Zero => {
                let out = [
                    shape[0],
                    self.c_out,
                    strided(shape[2], self.stride),
                    strided(shape[3], self.stride),
                ];
                Ok(ctx.graph.constant(Tensor::zeros(&out)))
            }
            Layout::Projection(u) => u.forward(ctx, store, prefix, x),
            Layout::Inverted { units, residual } => {
                let y = chain_forward(units, ctx, store, prefix, x)?;
                if *residual {
                    Ok(ctx.graph.add(x, y)?)
                } else {
                    Ok(y)
                }
            }
            Layout::ShuffleBasic { branch } => {
                let half = self.c_in / 2;
                let parts = ctx.graph.channel_split(x, &[half, half])?;
                let r = chain_forward(branch, ctx, store, prefix, parts[1])?;
                let cat = ctx.graph.concat(&[parts[0], r])?;
                Ok(ctx.graph.channel_shuffle(cat, 2)?)
            }
            Layout::ShuffleDown { left, right } => {
                let l = chain_forward(left, ctx, store, prefix, x)?;
                let r = chain_forward(right, ctx, store, prefix, x)?;
                let cat = ctx.graph.concat(&[l, r])?;
                Ok(ctx.graph.channel_shuffle(cat, 2)?)
            }
        }
    }

    pub fn out_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [
            self.c_out,
            strided(input[1], self.stride),
            strided(input[2], self.stride),
        ]
    }

    /// FLOPs per sample: 2 per multiply-accumulate over every convolution.
    pub fn flops(&self, input: [usize; 3]) -> Result<u64> {
        if input[0] != self.c_in {
            return Err(Error::Shape(format!(
                "{} block expects {} input channels, got {}",
                self.spec, self.c_in, input[0]
            )));
        }
        Ok(match &self.layout {
            Layout::Identity | Layout::Zero => 0,
            Layout::Projection(u) => u.flops(input)?,
            Layout::Inverted { units, .. } | Layout::ShuffleBasic { branch: units } => {
                let input = match &self.layout {
                    Layout::ShuffleBasic { .. } => [input[0] / 2, input[1], input[2]],
                    _ => input,
                };
                chain_flops(units, input)?.0
            }
            Layout::ShuffleDown { left, right } => chain_flops(left, input)?.0 + chain_flops(right, input)?.0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Convolution units, in forward order.
    pub fn units(&self) -> Vec<&ConvUnit> {
        layout_units(&self.layout)
    }
}

fn layout_units(layout: &Layout) -> Vec<&ConvUnit> {
    match layout {
        Layout::Identity | Layout::Zero => vec![],
        Layout::Projection(u) => vec![u],
        Layout::Inverted { units, .. } => units.iter().collect(),
        Layout::ShuffleBasic { branch } => branch.iter().collect(),
        Layout::ShuffleDown { left, right } => left.iter().chain(right.iter()).collect(),
    }
}
