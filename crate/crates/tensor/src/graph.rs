//! Recording graph and reverse-mode differentiation.
//!
//! Every primitive application appends one node holding its output value.
//! Nodes are stored in execution order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::fmt;
use std::str::FromStr;

use crate::conv::{self, Conv2dAttrs, ConvAlgo, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::tensor::{Precision, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    ScalarMul,
    Relu,
    Conv2d,
    BatchNorm,
    GlobalAvgPool,
    ChannelShuffle,
    ChannelSplit,
    Concat,
    Softmax,
    Log,
    CrossEntropyLoss,
    // structural helpers
    Mul,
    Sum,
    Reshape,
    Index,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::ScalarMul,
        Primitive::Relu,
        Primitive::Conv2d,
        Primitive::BatchNorm,
        Primitive::GlobalAvgPool,
        Primitive::ChannelShuffle,
        Primitive::ChannelSplit,
        Primitive::Concat,
        Primitive::Softmax,
        Primitive::Log,
        Primitive::CrossEntropyLoss,
        Primitive::Mul,
        Primitive::Sum,
        Primitive::Reshape,
        Primitive::Index,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::ScalarMul => "scalar_mul",
            Primitive::Relu => "relu",
            Primitive::Conv2d => "conv2d",
            Primitive::BatchNorm => "batch_norm",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::ChannelShuffle => "channel_shuffle",
            Primitive::ChannelSplit => "channel_split",
            Primitive::Concat => "concat",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::CrossEntropyLoss => "cross_entropy_loss",
            Primitive::Mul => "mul",
            Primitive::Sum => "sum",
            Primitive::Reshape => "reshape",
            Primitive::Index => "index",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == norm)
            .ok_or_else(|| TensorError::UnknownPrimitive(s.to_string()))
    }
}

/// Batch normalization behavior.
#[derive(Clone, Debug, PartialEq)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with externally tracked running statistics.
    Eval {
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    },
}

/// Per-channel statistics of one training-mode batch norm application.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Attribute bag for the generic [`Graph::apply`] entry point.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub conv: Option<Conv2dAttrs>,
    pub norm: Option<NormMode>,
    pub factor: Option<f64>,
    pub groups: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub labels: Option<Vec<usize>>,
    pub from_logits: bool,
    pub shape: Option<Vec<usize>>,
    pub index: Option<usize>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalarMul {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
    },
    Log {
        x: Var,
    },
    CrossEntropy {
        x: Var,
        labels: Vec<usize>,
        from_logits: bool,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Index {
        x: Var,
        index: usize,
    },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Add { .. } => Primitive::Add,
            Op::Mul { .. } => Primitive::Mul,
            Op::ScalarMul { .. } | Op::Scale { .. } => Primitive::ScalarMul,
            Op::Relu { .. } => Primitive::Relu,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::BatchNorm { .. } => Primitive::BatchNorm,
            Op::GlobalAvgPool { .. } => Primitive::GlobalAvgPool,
            Op::ChannelShuffle { .. } => Primitive::ChannelShuffle,
            Op::Slice { .. } => Primitive::ChannelSplit,
            Op::Concat { .. } => Primitive::Concat,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::Log { .. } => Primitive::Log,
            Op::CrossEntropy { .. } => Primitive::CrossEntropyLoss,
            Op::Sum { .. } => Primitive::Sum,
            Op::Reshape { .. } => Primitive::Reshape,
            Op::Index { .. } => Primitive::Index,
        })
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ScalarMul { x, s } => vec![*x, *s],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::GlobalAvgPool { x }
            | Op::ChannelShuffle { x, .. }
            | Op::Slice { x, .. }
            | Op::Softmax { x }
            | Op::Log { x }
            | Op::CrossEntropy { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::Index { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    stats: Option<BatchStats>,
}

/// Read-only view of one recorded primitive application.
#[derive(Clone, Debug)]
pub struct Record {
    pub primitive: Primitive,
    pub inputs: Vec<Var>,
    pub output: Var,
    /// Set for convolution records.
    pub conv: Option<ConvGeometry>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a node, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

pub struct Graph {
    precision: Precision,
    conv_algo: ConvAlgo,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Precision::F32)
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

fn attr_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Attr {
        op,
        detail: detail.into(),
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            conv_algo: ConvAlgo::default(),
            nodes: Vec::new(),
        }
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics computed by a training-mode `batch_norm` node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        self.nodes[v.0].stats.as_ref()
    }

    /// Executed primitive applications, in execution order.
    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.op.primitive().map(|primitive| Record {
                    primitive,
                    inputs: n.op.inputs(),
                    output: Var(i),
                    conv: match &n.op {
                        Op::Conv2d { geo, .. } => Some(*geo),
                        _ => None,
                    },
                })
            })
            .collect()
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op) -> Result<Var> {
        self.precision.round_slice(&mut data);
        let max = self.precision.max_value();
        if data.iter().any(|v| !v.is_finite() || v.abs() > max) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            stats: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- primitives -------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b })
    }

    /// Elementwise sum. `b` may also be a one-element tensor or match a
    /// trailing suffix of `a`'s shape (bias broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        let compatible = sa == sb || sb == [1] || (sb.len() < sa.len() && sa.ends_with(sb));
        if !compatible {
            return Err(shape_err("add", format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bv = self.value(b).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % bv.len()])
            .collect();
        self.push("add", sa, out, Op::Add { a, b })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(shape_err("mul", format!("{sa:?} vs {:?}", self.shape(b))));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", sa, out, Op::Mul { a, b })
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err(
                "scalar_mul",
                format!("scale operand must have one element, got {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        let shape = self.shape(x).to_vec();
        let out = self.value(x).data().iter().map(|v| v * sv).collect();
        self.push("scalar_mul", shape, out, Op::ScalarMul { x, s })
    }

    /// Multiplies `x` by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(attr_err("scalar_mul", "factor must be finite"));
        }
        let shape = self.shape(x).to_vec();
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        self.push("scalar_mul", shape, out, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        self.push("relu", shape, out, Op::Relu { x })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, attrs: Conv2dAttrs) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), attrs)?;
        let out = conv::forward(&geo, self.value(x).data(), self.value(w).data(), self.conv_algo);
        self.push("conv2d", geo.out_shape().to_vec(), out, Op::Conv2d { x, w, geo })
    }

    /// Per-channel normalization of `[N, C, ...]` input with affine `gamma`, `beta` of shape `[C]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: &NormMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(
                "batch_norm",
                format!("need [N, C, ...], got {shape:?}"),
            ));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "affine parameters {:?}/{:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let n = shape[0];
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        let xv = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            NormMode::Train { eps } => {
                if count < 2 {
                    return Err(shape_err(
                        "batch_norm",
                        format!("training statistics need at least 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for v in &xv[base..base + inner] {
                            s += v;
                        }
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for v in &xv[base..base + inner] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var, *eps, true)
            }
            NormMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(attr_err("batch_norm", "running statistics length mismatch"));
                }
                (running_mean.clone(), running_var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let var_out = self.push(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        if train {
            self.nodes[var_out.0].stats = Some(BatchStats { mean, var, count });
        }
        Ok(var_out)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("need NCHW, got {shape:?}")));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|i| xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push("global_avg_pool", vec![n, c], out, Op::GlobalAvgPool { x })
    }

    /// Channel shuffle: view channels as `[groups, C/groups]` and transpose.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(
                "channel_shuffle",
                format!("need [N, C, ...], got {shape:?}"),
            ));
        }
        let c = shape[1];
        if groups == 0 || c % groups != 0 {
            return Err(attr_err(
                "channel_shuffle",
                format!("groups={groups} must divide {c} channels"),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let out = shuffle_raw(self.value(x).data(), shape[0], c, inner, groups, false);
        self.push("channel_shuffle", shape, out, Op::ChannelShuffle { x, groups })
    }

    /// Splits along the channel axis into consecutive parts of the given sizes.
    pub fn channel_split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || sizes.iter().sum::<usize>() != shape[1] || sizes.contains(&0) {
            return Err(shape_err(
                "channel_split",
                format!("cannot split {shape:?} into channel sizes {sizes:?}"),
            ));
        }
        let mut start = 0;
        let mut outs = Vec::with_capacity(sizes.len());
        for &len in sizes {
            outs.push(self.slice_axis(x, 1, start, len)?);
            start += len;
        }
        Ok(outs)
    }

    fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("channel_split", out_shape, out, Op::Slice { x, axis, start })
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let axis = 1;
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if base_shape.len() < 2 {
            return Err(shape_err("concat", format!("need rank >= 2, got {base_shape:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base_shape.len()
                || s[..axis] != base_shape[..axis]
                || s[axis + 1..] != base_shape[axis + 1..]
            {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base_shape:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let d = self.shape(*v)[axis];
                let xv = self.value(*v).data();
                out.extend_from_slice(&xv[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        self.push("softmax", shape, out, Op::Softmax { x })
    }

    /// Natural logarithm; input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xv = self.value(x).data();
        if xv.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let out = xv.iter().map(|v| v.ln()).collect();
        self.push("log", shape, out, Op::Log { x })
    }

    /// Mean negative log-likelihood over a batch of `[N, K]` rows.
    ///
    /// Rows are probabilities, or unnormalized logits when `from_logits`
    /// is set (a log-softmax is fused in for stability).
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize], from_logits: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy_loss",
                format!("input {shape:?} with {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(
                "cross_entropy_loss",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let xv = self.value(x).data();
        let mut total = 0.0;
        for (row, &y) in xv.chunks(k).zip(labels) {
            let nll = if from_logits {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[y]
            } else {
                if row[y] <= 0.0 {
                    return Err(TensorError::NonFinite {
                        op: "cross_entropy_loss",
                    });
                }
                -row[y].ln()
            };
            total += nll;
        }
        let loss = total / labels.len() as f64;
        self.push(
            "cross_entropy_loss",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                x,
                labels: labels.to_vec(),
                from_logits,
            },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.value(x).numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).data().to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { x })
    }

    /// Picks one element (flat index) as a `[1]` tensor.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(shape_err("index", format!("index {index} out of {n} elements")));
        }
        let v = self.value(x).data()[index];
        self.push("index", vec![1], vec![v], Op::Index { x, index })
    }

    /// Generic entry point dispatching on a primitive id.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var], attrs: &Attrs) -> Result<Vec<Var>> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(shape_err(
                    prim.name(),
                    format!("expects {n} inputs, got {}", inputs.len()),
                ));
            }
            Ok(())
        };
        let one = |r: Result<Var>| r.map(|v| vec![v]);
        match prim {
            Primitive::MatMul => {
                need(2)?;
                one(self.matmul(inputs[0], inputs[1]))
            }
            Primitive::Add => {
                need(2)?;
                one(self.add(inputs[0], inputs[1]))
            }
            Primitive::Mul => {
                need(2)?;
                one(self.mul(inputs[0], inputs[1]))
            }
            Primitive::ScalarMul => match (inputs.len(), attrs.factor) {
                (2, _) => one(self.scalar_mul(inputs[0], inputs[1])),
                (1, Some(f)) => one(self.scale(inputs[0], f)),
                _ => Err(attr_err(
                    "scalar_mul",
                    "needs a scalar operand or a `factor` attribute",
                )),
            },
            Primitive::Relu => {
                need(1)?;
                one(self.relu(inputs[0]))
            }
            Primitive::Conv2d => {
                need(2)?;
                let a = attrs
                    .conv
                    .ok_or_else(|| attr_err("conv2d", "missing conv attributes"))?;
                one(self.conv2d(inputs[0], inputs[1], a))
            }
            Primitive::BatchNorm => {
                need(3)?;
                let mode = attrs
                    .norm
                    .as_ref()
                    .ok_or_else(|| attr_err("batch_norm", "missing norm mode"))?;
                one(self.batch_norm(inputs[0], inputs[1], inputs[2], mode))
            }
            Primitive::GlobalAvgPool => {
                need(1)?;
                one(self.global_avg_pool(inputs[0]))
            }
            Primitive::ChannelShuffle => {
                need(1)?;
                let g = attrs
                    .groups
                    .ok_or_else(|| attr_err("channel_shuffle", "missing groups"))?;
                one(self.channel_shuffle(inputs[0], g))
            }
            Primitive::ChannelSplit => {
                need(1)?;
                let sizes = attrs
                    .sizes
                    .as_ref()
                    .ok_or_else(|| attr_err("channel_split", "missing sizes"))?;
                self.channel_split(inputs[0], sizes)
            }
            Primitive::Concat => one(self.concat(inputs)),
            Primitive::Softmax => {
                need(1)?;
                one(self.softmax(inputs[0]))
            }
            Primitive::Log => {
                need(1)?;
                one(self.log(inputs[0]))
            }
            Primitive::CrossEntropyLoss => {
                need(1)?;
                let labels = attrs
                    .labels
                    .as_ref()
                    .ok_or_else(|| attr_err("cross_entropy_loss", "missing labels"))?;
                one(self.cross_entropy(inputs[0], labels, attrs.from_logits))
            }
            Primitive::Sum => {
                need(1)?;
                one(self.sum(inputs[0]))
            }
            Primitive::Reshape => {
                need(1)?;
                let shape = attrs
                    .shape
                    .as_ref()
                    .ok_or_else(|| attr_err("reshape", "missing shape"))?;
                one(self.reshape(inputs[0], shape))
            }
            Primitive::Index => {
                need(1)?;
                let i = attrs.index.ok_or_else(|| attr_err("index", "missing index"))?;
                one(self.index(inputs[0], i))
            }
        }
    }

    /// Same as [`Graph::apply`] with a textual primitive id.
    pub fn apply_named(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Vec<Var>> {
        let prim: Primitive = name.parse()?;
        self.apply(prim, inputs, attrs)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad || i == loss.0 {
                self.propagate(node, &dy, &mut grads)?;
            }
            grads[i] = Some(dy);
        }
        let precision = self.precision;
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, g) in grads.into_iter().enumerate() {
            out.push(match g {
                Some(mut d) if self.nodes[i].requires_grad => {
                    precision.round_slice(&mut d);
                    if d.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), d)?)
                }
                _ => None,
            });
        }
        out.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: out, shapes })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dY B^T, dB = A^T dY
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += dy[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * dy[i * n + j];
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add { a, b } => {
                acc(*a, dy.to_vec());
                let nb = self.value(*b).numel();
                let mut db = vec![0.0; nb];
                for (i, d) in dy.iter().enumerate() {
                    db[i % nb] += d;
                }
                acc(*b, db);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, dy.iter().zip(bv).map(|(d, y)| d * y).collect());
                acc(*b, dy.iter().zip(av).map(|(d, x)| d * x).collect());
            }
            Op::ScalarMul { x, s } => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                acc(*x, dy.iter().map(|d| d * sv).collect());
                acc(*s, vec![dy.iter().zip(xv).map(|(d, v)| d * v).sum()]);
            }
            Op::Scale { x, factor } => {
                acc(*x, dy.iter().map(|d| d * factor).collect());
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    dy.iter()
                        .zip(xv)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect(),
                );
            }
            Op::Conv2d { x, w, geo } => {
                let (dx, dw) = conv::backward(
                    geo,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    self.conv_algo,
                );
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                let mut dx = vec![0.0; dy.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            dx[i] = if *train {
                                gv[ch] * inv_std[ch] / m * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                gv[ch] * inv_std[ch] * dy[i]
                            };
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; s.iter().product()];
                for (i, d) in dy.iter().enumerate() {
                    let g = d / hw as f64;
                    dx[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v = g);
                }
                acc(*x, dx);
            }
            Op::ChannelShuffle { x, groups } => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                acc(*x, shuffle_raw(dy, s[0], s[1], inner, *groups, true));
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let dim = s[*axis];
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                }
                acc(*x, dx);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let d = self.shape(*v)[*axis];
                    let mut dx = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dx.extend_from_slice(&dy[base..base + d * inner]);
                    }
                    acc(*v, dx);
                    offset += d;
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, dr), out) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        out[i] = yr[i] * (dr[i] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                acc(*x, dy.iter().zip(xv).map(|(d, v)| d / v).collect());
            }
            Op::CrossEntropy {
                x,
                labels,
                from_logits,
            } => {
                let xv = self.value(*x).data();
                let k = self.shape(*x)[1];
                let scale = dy[0] / labels.len() as f64;
                let mut dx = vec![0.0; xv.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let row = &xv[r * k..(r + 1) * k];
                    let out = &mut dx[r * k..(r + 1) * k];
                    if *from_logits {
                        out.copy_from_slice(row);
                        softmax_in_place(out);
                        out[y] -= 1.0;
                        out.iter_mut().for_each(|v| *v *= scale);
                    } else {
                        out[y] = -scale / row[y];
                    }
                }
                acc(*x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                acc(*x, vec![dy[0]; n]);
            }
            Op::Reshape { x } => acc(*x, dy.to_vec()),
            Op::Index { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[*index] = dy[0];
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Channel shuffle on raw NC* data. `inverse` undoes the permutation.
pub(crate) fn shuffle_raw(
    x: &[f64],
    n: usize,
    c: usize,
    inner: usize,
    groups: usize,
    inverse: bool,
) -> Vec<f64> {
    let per = c / groups;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for g in 0..groups {
            for i in 0..per {
                // input channel g*per + i lands on output channel i*groups + g
                let src = g * per + i;
                let dst = i * groups + g;
                let (from, to) = if inverse { (dst, src) } else { (src, dst) };
                let f = (b * c + from) * inner;
                let t = (b * c + to) * inner;
                out[t..t + inner].copy_from_slice(&x[f..f + inner]);
            }
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
