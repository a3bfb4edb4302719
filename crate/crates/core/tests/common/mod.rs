#![allow(dead_code)]

use std::collections::HashMap;

use prunas_core::nn::{Block, BlockSpec, Depth, ForwardCtx, Mode, OperatorSpec};
use prunas_tensor::{finite_diff_check_many, Graph, Primitive, Record, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// (block, operator, c_in, c_out, stride) covering every block layout.
pub fn block_cases() -> Vec<(BlockSpec, OperatorSpec, usize, usize, usize)> {
    use BlockSpec as B;
    use OperatorSpec as O;
    vec![
        (B::InvertedResidual { expand: 1 }, O::depthwise(3), 4, 4, 1),
        (B::InvertedResidual { expand: 3 }, O::depthwise(5), 4, 4, 1),
        (B::InvertedResidual { expand: 6 }, O::depthwise(3), 2, 4, 2),
        (B::InvertedResidual { expand: 1 }, O::full(3), 4, 6, 1),
        (B::Shuffle { depth: Depth::Short }, O::depthwise(3), 4, 4, 1),
        (B::Shuffle { depth: Depth::Long }, O::depthwise(5), 4, 4, 1),
        (B::Shuffle { depth: Depth::Short }, O::depthwise(3), 4, 8, 2),
        (B::Shuffle { depth: Depth::Long }, O::full(3), 4, 4, 2),
        (B::Skip, O::depthwise(3), 4, 4, 1),
        (B::Skip, O::depthwise(3), 4, 6, 2),
        (B::Zero, O::depthwise(3), 4, 4, 2),
    ]
}

fn contract(g: &mut Graph, y: Var, seed: u64) -> prunas_tensor::Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n as u64)
        .map(|i| ((i * 7919 + seed * 104_729) % 997) as f64 / 498.5 - 1.0)
        .collect();
    let r = g.constant(Tensor::new(shape, w)?);
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Worst relative gradient error of a block in train mode, with respect to
/// its input and every parameter.
pub fn block_gradcheck(block: &Block, x: &Tensor, seed: u64) -> f64 {
    let names: Vec<String> = block.params.params().map(|(n, _)| n.clone()).collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(names.iter().map(|n| block.params.get(n).unwrap().clone()));
    finite_diff_check_many(
        |g, vars| {
            let provided: HashMap<String, Var> =
                names.iter().cloned().zip(vars[1..].iter().copied()).collect();
            let mut ctx = ForwardCtx::new(g, Mode::Train).with_provided(provided);
            let y = block
                .forward(&mut ctx, "", vars[0])
                .map_err(|e| prunas_tensor::TensorError::GradCheck(e.to_string()))?;
            contract(g, y, seed)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

/// Counts FLOPs per sample by inspecting the recorded primitives:
/// 2 per multiply-accumulate of every convolution and matrix product.
pub fn instrumented_flops(g: &Graph, records: &[Record]) -> u64 {
    let mut total = 0;
    for r in records {
        match r.primitive {
            Primitive::Conv2d => {
                let geo = r.conv.as_ref().expect("conv record carries geometry");
                total += 2 * geo.macs_per_sample();
            }
            Primitive::MatMul => {
                let a = g.shape(r.inputs[0]);
                let b = g.shape(r.inputs[1]);
                total += 2 * (a[1] * b[1]) as u64;
            }
            _ => {}
        }
    }
    total
}
