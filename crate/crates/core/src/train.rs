//! Mini-batching and plain supervised training of single-path models.

use std::collections::HashMap;

use prunas_tensor::{
    Gradients, Graph, LrSchedule, MomentumSgd, Optimizer, ParamUpdate, Precision, Tensor, Var,
};
use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Mode, Model};
use crate::seed::{self, Stream};

const EVAL_BATCH: usize = 256;

/// Shuffled index batches. A trailing batch smaller than half of
/// `batch_size` is merged into the previous one, so no batch is tiny.
pub fn batches<R: rand::Rng + ?Sized>(n: usize, batch_size: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
    let mut ids: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        ids.shuffle(r);
    }
    let bs = batch_size.max(1);
    let mut out: Vec<Vec<usize>> = ids.chunks(bs).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() * 2 < bs) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out
}

/// Hands the gradient of every parameter that was bound in the graph to
/// the optimizer; unbound parameters are left alone.
pub fn apply_gradients<O: Optimizer + ?Sized>(
    mut params: Vec<(String, &mut Tensor)>,
    bound: &[(String, Var)],
    grads: &Gradients,
    opt: &mut O,
    lr: f64,
) -> Result<()> {
    let map: HashMap<&str, Var> = bound.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let gs: Vec<Option<Tensor>> = params
        .iter()
        .map(|(n, _)| map.get(n.as_str()).map(|v| grads.wrt(*v)))
        .collect();
    let mut updates: Vec<ParamUpdate> = params
        .iter_mut()
        .zip(&gs)
        .filter_map(|((name, value), g)| {
            g.as_ref().map(|grad| ParamUpdate {
                name,
                value: &mut **value,
                grad,
            })
        })
        .collect();
    opt.step(&mut updates, lr)?;
    Ok(())
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step<M, O>(model: &mut M, x: Tensor, labels: &[usize], opt: &mut O, lr: f64) -> Result<f64>
where
    M: Model + ?Sized,
    O: Optimizer + ?Sized,
{
    let mut g = Graph::new(Precision::F32);
    let xv = g.constant(x);
    let mut ctx = ForwardCtx::new(&mut g, Mode::Train);
    let logits = model.forward(&mut ctx, xv)?;
    let loss = ctx.graph.cross_entropy(logits, labels, true)?;
    let bound = ctx.bound().to_vec();
    let stats = ctx.norm_stats().to_vec();
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    apply_gradients(model.params_mut(), &bound, &grads, opt, lr)?;
    for (name, s) in &stats {
        model.update_norm(name, s);
    }
    Ok(value)
}

/// Class probabilities for every sample, in eval mode.
pub fn predict_probs<M: Model + ?Sized>(model: &M, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        let mut g = Graph::new(Precision::F32);
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::new(&mut g, Mode::Eval).frozen();
        let logits = model.forward(&mut ctx, xv)?;
        let p = g.softmax(logits)?;
        let k = g.shape(p)[1];
        out.extend(g.value(p).data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in eval mode.
pub fn accuracy<M: Model + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let probs = predict_probs(model, data)?;
    let correct = probs
        .iter()
        .zip(data.labels())
        .filter(|(p, l)| argmax(p) == **l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Settings for [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Trains with momentum SGD under a cosine schedule; returns the mean
/// training loss of each epoch.
pub fn fit<M: Model + ?Sized>(model: &mut M, data: &Dataset, cfg: &FitConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut rng = seed::stream(cfg.seed, Stream::Batches);
    let per_epoch = batches::<seed::Rng>(data.len(), cfg.batch_size, None).len() as u64;
    let sched = LrSchedule::Cosine {
        base: cfg.lr,
        total: per_epoch * cfg.epochs as u64,
    };
    let mut opt = MomentumSgd::new(cfg.momentum).with_weight_decay(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let bs = batches(data.len(), cfg.batch_size, Some(&mut rng));
        for b in &bs {
            let (x, y) = data.batch(b)?;
            let lr = sched.at(opt.steps());
            sum += train_step(model, x, &y, &mut opt, lr)?;
        }
        losses.push(sum / bs.len() as f64);
    }
    Ok(losses)
}
