use std::collections::{BTreeMap, HashMap};

use prunas_tensor::{Conv2dAttrs, ConvGeometry, Graph, NormMode, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Parameters and normalization statistics of one module, by local name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    running: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn add_norm(&mut self, name: &str, channels: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
        self.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.running.insert(
            name.to_string(),
            RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            },
        );
    }

    pub fn running(&self, name: &str) -> Result<&RunningStats> {
        self.running
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing running statistics `{name}`")))
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&String, &RunningStats)> {
        self.running.iter()
    }

    pub fn running_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.running.get_mut(name)
    }

    /// Blends one batch's statistics into the running averages.
    pub fn update_running(&mut self, name: &str, stats: &prunas_tensor::BatchStats) {
        if let Some(r) = self.running.get_mut(name) {
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            for i in 0..r.mean.len() {
                r.mean[i] = (1.0 - BN_MOMENTUM) * r.mean[i] + BN_MOMENTUM * stats.mean[i];
                r.var[i] = (1.0 - BN_MOMENTUM) * r.var[i] + BN_MOMENTUM * stats.var[i] * unbias;
            }
        }
    }
}

/// State threaded through one forward pass: the graph, the train/eval
/// mode, and the mapping from fully qualified parameter names to graph
/// variables.
pub struct ForwardCtx<'g> {
    pub graph: &'g mut Graph,
    pub mode: Mode,
    trainable: bool,
    bound: Vec<(String, Var)>,
    provided: Option<HashMap<String, Var>>,
    norm_stats: Vec<(String, prunas_tensor::BatchStats)>,
}

impl<'g> ForwardCtx<'g> {
    pub fn new(graph: &'g mut Graph, mode: Mode) -> Self {
        ForwardCtx {
            graph,
            mode,
            trainable: true,
            bound: Vec::new(),
            provided: None,
            norm_stats: Vec::new(),
        }
    }

    /// Parameters enter the graph as constants (no gradient).
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// Uses the given graph variables instead of the stored values for
    /// these fully qualified names.
    pub fn with_provided(mut self, provided: HashMap<String, Var>) -> Self {
        self.provided = Some(provided);
        self
    }

    pub fn bind(&mut self, full_name: String, value: &Tensor) -> Var {
        if let Some(v) = self.provided.as_ref().and_then(|p| p.get(&full_name)) {
            return *v;
        }
        let v = self.graph.leaf(value.clone(), self.trainable);
        self.bound.push((full_name, v));
        v
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn norm_stats(&self) -> &[(String, prunas_tensor::BatchStats)] {
        &self.norm_stats
    }

    /// Normalization with the module's affine parameters; records batch
    /// statistics in train mode.
    pub fn norm(&mut self, store: &ParamStore, prefix: &str, name: &str, x: Var) -> Result<Var> {
        let gamma = self.bind(
            format!("{prefix}{name}.gamma"),
            store.get(&format!("{name}.gamma"))?,
        );
        let beta = self.bind(
            format!("{prefix}{name}.beta"),
            store.get(&format!("{name}.beta"))?,
        );
        let mode = match self.mode {
            Mode::Train => NormMode::Train { eps: BN_EPS },
            Mode::Eval => {
                let r = store.running(name)?;
                NormMode::Eval {
                    running_mean: r.mean.clone(),
                    running_var: r.var.clone(),
                    eps: BN_EPS,
                }
            }
        };
        let y = self.graph.batch_norm(x, gamma, beta, &mode)?;
        if let Some(stats) = self.graph.batch_stats(y) {
            self.norm_stats.push((format!("{prefix}{name}"), stats.clone()));
        }
        Ok(y)
    }
}

/// Convolution (no bias) followed by optional normalization and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub attrs: Conv2dAttrs,
    pub norm: bool,
    pub relu: bool,
}

impl ConvUnit {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        ConvUnit {
            name: name.to_string(),
            c_in,
            c_out,
            kernel,
            attrs: Conv2dAttrs::new(stride, kernel / 2, groups),
            norm: true,
            relu: true,
        }
    }

    pub fn linear(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.c_out,
            self.c_in / self.attrs.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Kaiming-normal weights plus identity-initialized normalization.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let shape = self.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        store.insert(
            format!("{}.w", self.name),
            Tensor::randn(&shape, (2.0 / fan_in).sqrt(), rng),
        );
        if self.norm {
            store.add_norm(&format!("{}.bn", self.name), self.c_out);
        }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.bind(
            format!("{prefix}{}.w", self.name),
            store.get(&format!("{}.w", self.name))?,
        );
        let mut y = ctx.graph.conv2d(x, w, self.attrs)?;
        if self.norm {
            y = ctx.norm(store, prefix, &format!("{}.bn", self.name), y)?;
        }
        if self.relu {
            y = ctx.graph.relu(y)?;
        }
        Ok(y)
    }

    pub fn geometry(&self, input: [usize; 3]) -> Result<ConvGeometry> {
        Ok(ConvGeometry::new(
            &[1, input[0], input[1], input[2]],
            &self.weight_shape(),
            self.attrs,
        )?)
    }

    pub fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let g = self.geometry(input)?;
        Ok([g.c_out, g.out_h, g.out_w])
    }

    /// FLOPs per sample at the given input shape (2 per multiply-accumulate).
    pub fn flops(&self, input: [usize; 3]) -> Result<u64> {
        Ok(2 * self.geometry(input)?.macs_per_sample())
    }
}
