//! Warmup on the easiest classes, then staged bilevel search over a growing
//! class subset with candidate pruning between stages.

use prunas_tensor::{
    Adam, Graph, LrSchedule, MomentumSgd, Optimizer, ParamUpdate, Precision, Tensor, TensorError, Var,
};

use super::config::{ArchNorm, SearchConfig};
use super::log::{join_counts, EpochRow, LogitRow, SearchLog};
use crate::data::{Dataset, SplitPair};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Mode, Scaffold};
use crate::seed::{self, Stream};
use crate::supernet::{
    cost_penalty, cost_penalty_grad, gumbel_softmax_var, prune_count, ArchDescriptor, Supernet,
};
use crate::train::{self, batches};

/// Warmup (`step == 0`, weights only) or search step `step >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub step: usize,
    pub classes: usize,
    pub epochs: usize,
}

impl Phase {
    pub fn is_warmup(&self) -> bool {
        self.step == 0
    }
}

pub fn phases(cfg: &SearchConfig, k: usize) -> Vec<Phase> {
    phases_for(cfg, &cfg.class_counts(k))
}

/// Phases with explicit class counts (warmup first) and the epoch budget
/// of `cfg`.
pub fn phases_for(cfg: &SearchConfig, counts: &[usize]) -> Vec<Phase> {
    counts
        .iter()
        .copied()
        .enumerate()
        .map(|(step, classes)| Phase {
            step,
            classes,
            epochs: if step == 0 {
                cfg.warmup_epochs
            } else {
                cfg.epochs_per_step
            },
        })
        .collect()
}

fn batch_sizes(n: usize, bs: usize) -> Vec<usize> {
    batches::<seed::Rng>(n, bs, None).iter().map(Vec::len).collect()
}

/// Cumulative `(train, val, candidate)` forward counts after every epoch,
/// computed from the config and the per-class sample counts alone.
pub fn planned_forwards(
    cfg: &SearchConfig,
    counts: &[usize],
    train_sizes: &[usize],
    val_sizes: &[usize],
    ranking: &[usize],
    layers: usize,
    candidates: usize,
) -> Vec<(u64, u64, u64)> {
    let mut alive = candidates;
    let (mut tr, mut va, mut cand) = (0u64, 0u64, 0u64);
    let mut out = Vec::new();
    for ph in &phases_for(cfg, counts) {
        let t: usize = ranking[..ph.classes].iter().map(|&c| train_sizes[c]).sum();
        let v: usize = ranking[..ph.classes].iter().map(|&c| val_sizes[c]).sum();
        let v_epoch = if ph.is_warmup() {
            0
        } else if cfg.interleave {
            let vb = batch_sizes(v, cfg.batch_size);
            (0..batch_sizes(t, cfg.batch_size).len())
                .map(|i| vb[i % vb.len()])
                .sum()
        } else {
            v
        };
        for _ in 0..ph.epochs {
            tr += t as u64;
            va += v_epoch as u64;
            cand += ((t + v_epoch) * alive * layers) as u64;
            out.push((tr, va, cand));
        }
        if !ph.is_warmup() && cfg.prunes() {
            alive -= prune_count(alive, cfg.prune_ratio, ph.step == cfg.steps);
        }
    }
    out
}

/// Checks that `ranking` orders all `k` classes exactly once.
pub fn check_ranking(ranking: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if ranking.len() != k {
        return Err(Error::Easiness(format!(
            "ranking lists {} classes, dataset has {k}",
            ranking.len()
        )));
    }
    for &c in ranking {
        if c >= k || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Easiness(format!(
                "ranking is not a permutation (class {c})"
            )));
        }
    }
    Ok(())
}

struct EpochAcc {
    train_loss: f64,
    train_batches: usize,
    val_loss: f64,
    val_batches: usize,
    cost: f64,
    penalty: f64,
    cost_batches: usize,
}

impl EpochAcc {
    fn new() -> Self {
        EpochAcc {
            train_loss: 0.0,
            train_batches: 0,
            val_loss: 0.0,
            val_batches: 0,
            cost: 0.0,
            penalty: 0.0,
            cost_batches: 0,
        }
    }
}

/// Outcome of one architecture update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchStep {
    pub val_loss: f64,
    pub cost: f64,
    pub penalty: f64,
}

/// The mutable state of one search run.
pub struct Searcher {
    pub cfg: SearchConfig,
    pub supernet: Supernet,
    pub log: SearchLog,
    pub history: Vec<LogitRow>,
    ranking: Vec<usize>,
    split: SplitPair,
    config_hash: String,
    w_opt: MomentumSgd,
    a_opt: Adam,
    w_sched: LrSchedule,
    batch_rng: seed::Rng,
    gumbel_rng: seed::Rng,
    phases: Vec<Phase>,
    counters: (u64, u64, u64),
    epoch: usize,
    step: usize,
}

impl Searcher {
    pub fn new(cfg: &SearchConfig, data: &Dataset, ranking: &[usize]) -> Result<Self> {
        Self::with_counts(cfg, data, ranking, &cfg.class_counts(data.num_classes()))
    }

    /// Like [`Searcher::new`] but with explicit per-phase class counts,
    /// used by the ablations that leave the configured schedule.
    pub fn with_counts(
        cfg: &SearchConfig,
        data: &Dataset,
        ranking: &[usize],
        counts: &[usize],
    ) -> Result<Self> {
        cfg.validate()?;
        let k = data.num_classes();
        check_ranking(ranking, k)?;
        if counts.len() != cfg.steps + 1 || counts.iter().any(|&n| n == 0 || n > k) {
            return Err(Error::config(
                "class_schedule",
                format!(
                    "class counts {counts:?} do not fit {} steps over {k} classes",
                    cfg.steps
                ),
            ));
        }
        let phases = phases_for(cfg, counts);
        let space = cfg.space.resolve()?;
        let scaffold = Scaffold::new(data.sample_shape(), space.stem, space.stages.clone(), k)?;
        let mut init = seed::stream(cfg.seed, Stream::Init);
        let supernet = Supernet::build(&space, scaffold, cfg.tau, &mut init)?;
        let split = data.split_train_val(cfg.per_class_val, cfg.seed)?;
        let train_sizes = split.train.class_sizes();
        let total_steps: u64 = phases
            .iter()
            .map(|ph| {
                let t: usize = ranking[..ph.classes].iter().map(|&c| train_sizes[c]).sum();
                (ph.epochs * batch_sizes(t, cfg.batch_size).len()) as u64
            })
            .sum();
        Ok(Searcher {
            supernet,
            log: SearchLog::default(),
            history: Vec::new(),
            ranking: ranking.to_vec(),
            split,
            config_hash: cfg.hash()?,
            w_opt: MomentumSgd::new(cfg.momentum).with_weight_decay(cfg.weight_decay),
            a_opt: Adam::default(),
            w_sched: LrSchedule::Cosine {
                base: cfg.lr_weights,
                total: total_steps,
            },
            batch_rng: seed::stream(cfg.seed, Stream::Batches),
            gumbel_rng: seed::stream(cfg.seed, Stream::Gumbel),
            phases,
            counters: (0, 0, 0),
            epoch: 0,
            step: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn split(&self) -> &SplitPair {
        &self.split
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Training and validation subsets of the `n` easiest classes.
    pub fn subsets(&self, n: usize) -> Result<(Dataset, Dataset)> {
        let ids = &self.ranking[..n];
        Ok((
            self.split.train.subset_by_classes(ids)?,
            self.split.val.subset_by_classes(ids)?,
        ))
    }

    fn diverged(&self, reason: impl Into<String>) -> Error {
        Error::Diverged {
            step: self.step,
            epoch: self.epoch,
            reason: reason.into(),
        }
    }

    fn guard<T>(&self, r: Result<T>) -> Result<T> {
        match r {
            Err(Error::Tensor(e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient(_)))) => {
                Err(self.diverged(e.to_string()))
            }
            other => other,
        }
    }

    /// One weight update on a batch with freshly sampled, constant mixture
    /// weights. Returns `(loss, sampled expected cost)`.
    pub fn weight_step(&mut self, data: &Dataset, ids: &[usize]) -> Result<(f64, f64)> {
        let r = self.weight_step_inner(data, ids);
        self.guard(r)
    }

    fn weight_step_inner(&mut self, data: &Dataset, ids: &[usize]) -> Result<(f64, f64)> {
        let noise = self.supernet.sample_noise(&mut self.gumbel_rng);
        let p = self.supernet.mixture(&noise)?;
        let alive = self.supernet.grid.alive_all();
        let cost = self.supernet.costs.expected(&p, &alive)?;
        let (x, y) = data.batch(ids)?;
        let mut g = Graph::new(Precision::F32);
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::new(&mut g, Mode::Train);
        let pv = self.supernet.constant_mixture(&mut ctx, &p);
        let logits = self.supernet.forward(&mut ctx, xv, &pv)?;
        let loss = ctx.graph.cross_entropy(logits, &y, true)?;
        let bound = ctx.bound().to_vec();
        let stats = ctx.norm_stats().to_vec();
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(self.diverged("training loss is not finite"));
        }
        let grads = g.backward(loss)?;
        let lr = self.w_sched.at(self.w_opt.steps());
        train::apply_gradients(self.supernet.params_mut(), &bound, &grads, &mut self.w_opt, lr)?;
        for (name, s) in &stats {
            self.supernet.update_norm(name, s);
        }
        Ok((lv, cost))
    }

    /// One architecture update on a validation batch with weights frozen,
    /// minimizing `L_val * penalty(C)`.
    pub fn arch_step(&mut self, data: &Dataset, ids: &[usize]) -> Result<ArchStep> {
        let r = self.arch_step_inner(data, ids);
        self.guard(r)
    }

    fn arch_step_inner(&mut self, data: &Dataset, ids: &[usize]) -> Result<ArchStep> {
        let noise = self.supernet.sample_noise(&mut self.gumbel_rng);
        let alive = self.supernet.grid.alive_all();
        let (x, y) = data.batch(ids)?;
        let mut g = Graph::new(Precision::F32);
        let xv = g.constant(x);
        let mode = match self.cfg.arch_norm {
            ArchNorm::Batch => Mode::Train,
            ArchNorm::Running => Mode::Eval,
        };
        let mut ctx = ForwardCtx::new(&mut g, mode).frozen();
        let mut a_vars: Vec<Var> = Vec::with_capacity(alive.len());
        let mut p_vars: Vec<Var> = Vec::with_capacity(alive.len());
        for (l, al) in alive.iter().enumerate() {
            let a = Tensor::from_vec(al.iter().map(|&j| self.supernet.arch.logits[l][j]).collect());
            let av = ctx.graph.param(a);
            p_vars.push(gumbel_softmax_var(&mut *ctx.graph, av, self.cfg.tau, &noise[l])?);
            a_vars.push(av);
        }
        let logits = self.supernet.forward(&mut ctx, xv, &p_vars)?;
        let loss = ctx.graph.cross_entropy(logits, &y, true)?;
        let cost = self.supernet.costs.expected_var(&mut g, &p_vars, &alive)?;
        let (lv, cv) = (g.value(loss).item(), g.value(cost).item());
        if !lv.is_finite() || !cv.is_finite() {
            return Err(self.diverged("validation loss is not finite"));
        }
        let (beta, gamma) = (self.cfg.beta, self.cfg.gamma);
        let m = cost_penalty(cv, beta, gamma);
        // same gradient as L * m(C): m dL + L m'(C) dC
        let s1 = g.scale(loss, m)?;
        let s2 = g.scale(cost, lv * cost_penalty_grad(cv, beta, gamma))?;
        let objective = g.add(s1, s2)?;
        let grads = g.backward(objective)?;

        let n = self.supernet.grid.candidates.len();
        let mut full: Vec<(String, Tensor, Tensor)> = Vec::with_capacity(alive.len());
        for (l, (al, av)) in alive.iter().zip(&a_vars).enumerate() {
            let ga = grads.wrt(*av);
            let mut gfull = vec![0.0; n];
            for (k, &j) in al.iter().enumerate() {
                gfull[j] = ga.data()[k];
            }
            full.push((
                format!("arch.l{l}"),
                Tensor::from_vec(self.supernet.arch.logits[l].clone()),
                Tensor::from_vec(gfull),
            ));
        }
        let mut updates: Vec<ParamUpdate> = full
            .iter_mut()
            .map(|(name, value, grad)| ParamUpdate {
                name: name.as_str(),
                value,
                grad: &*grad,
            })
            .collect();
        self.a_opt.step(&mut updates, self.cfg.lr_arch)?;
        for (l, (_, value, _)) in full.into_iter().enumerate() {
            self.supernet.arch.logits[l] = value.into_data();
        }
        Ok(ArchStep {
            val_loss: lv,
            cost: cv,
            penalty: m,
        })
    }

    fn run_epoch(&mut self, ph: Phase, train: &Dataset, val: &Dataset) -> Result<()> {
        let mut acc = EpochAcc::new();
        let tb = batches(train.len(), self.cfg.batch_size, Some(&mut self.batch_rng));
        let search = !ph.is_warmup();
        let vb = if search {
            batches(val.len(), self.cfg.batch_size, Some(&mut self.batch_rng))
        } else {
            Vec::new()
        };
        let alive_total: usize = self.supernet.grid.alive_counts().iter().sum();
        let mut seen_train = 0usize;
        let mut seen_val = 0usize;
        let arch = |s: &mut Self, acc: &mut EpochAcc, ids: &[usize]| -> Result<()> {
            let r = s.arch_step(val, ids)?;
            acc.val_loss += r.val_loss;
            acc.val_batches += 1;
            acc.cost += r.cost;
            acc.penalty += r.penalty;
            acc.cost_batches += 1;
            Ok(())
        };
        for (i, ids) in tb.iter().enumerate() {
            let (loss, cost) = self.weight_step(train, ids)?;
            seen_train += ids.len();
            acc.train_loss += loss;
            acc.train_batches += 1;
            if !search {
                acc.cost += cost;
                acc.penalty += cost_penalty(cost, self.cfg.beta, self.cfg.gamma);
                acc.cost_batches += 1;
            } else if self.cfg.interleave && !vb.is_empty() {
                let v = &vb[i % vb.len()];
                arch(self, &mut acc, v)?;
                seen_val += v.len();
            }
        }
        if search && !self.cfg.interleave {
            for ids in &vb {
                arch(self, &mut acc, ids)?;
                seen_val += ids.len();
            }
        }
        self.counters.0 += seen_train as u64;
        self.counters.1 += seen_val as u64;
        self.counters.2 += ((seen_train + seen_val) * alive_total) as u64;
        let nc = acc.cost_batches.max(1) as f64;
        self.log.rows.push(EpochRow {
            phase: if search { "search" } else { "warmup" }.into(),
            step: ph.step,
            epoch: self.epoch,
            classes: ph.classes,
            train_loss: acc.train_loss / acc.train_batches.max(1) as f64,
            val_loss: (acc.val_batches > 0).then(|| acc.val_loss / acc.val_batches as f64),
            expected_cost: acc.cost / nc,
            penalty: acc.penalty / nc,
            alive: join_counts(&self.supernet.grid.alive_counts()),
            lr_weights: self.w_sched.at(self.w_opt.steps()),
            train_forwards: self.counters.0,
            val_forwards: self.counters.1,
            sample_forwards: self.counters.0 + self.counters.1,
            candidate_forwards: self.counters.2,
        });
        Ok(())
    }

    /// Runs every phase; `on_step` sees the supernet after each search
    /// step (after pruning).
    pub fn run(
        &mut self,
        mut on_step: Option<&mut dyn FnMut(usize, &Supernet) -> Result<()>>,
    ) -> Result<ArchDescriptor> {
        for ph in self.phases.clone() {
            self.step = ph.step;
            let (train, val) = self.subsets(ph.classes)?;
            if train.len() < self.cfg.batch_size {
                log::warn!(
                    "step {}: {} training samples, fewer than batch size {}; using one batch",
                    ph.step,
                    train.len(),
                    self.cfg.batch_size
                );
            }
            for _ in 0..ph.epochs {
                self.run_epoch(ph, &train, &val)?;
                self.epoch += 1;
            }
            if ph.is_warmup() {
                continue;
            }
            for l in 0..self.supernet.layers() {
                for j in self.supernet.grid.alive(l) {
                    self.history.push(LogitRow {
                        step: ph.step,
                        layer: l,
                        candidate: j,
                        logit: self.supernet.arch.logits[l][j],
                    });
                }
            }
            if self.cfg.prunes() {
                self.supernet
                    .prune(self.cfg.prune_ratio, ph.step == self.cfg.steps)?;
            }
            if let Some(f) = on_step.as_mut() {
                f(ph.step, &self.supernet)?;
            }
        }
        self.supernet.derive(self.cfg.seed, &self.config_hash)
    }

    /// The closed-form forward counts for this run.
    pub fn planned_forwards(&self) -> Vec<(u64, u64, u64)> {
        planned_forwards(
            &self.cfg,
            &self.phases.iter().map(|p| p.classes).collect::<Vec<_>>(),
            &self.split.train.class_sizes(),
            &self.split.val.class_sizes(),
            &self.ranking,
            self.supernet.layers(),
            self.supernet.grid.candidates.len(),
        )
    }
}

pub struct SearchOutcome {
    pub arch: ArchDescriptor,
    pub log: SearchLog,
    pub history: Vec<LogitRow>,
    pub supernet: Supernet,
}

/// Convenience wrapper: builds a [`Searcher`] and runs it to completion.
pub fn run_search(cfg: &SearchConfig, data: &Dataset, ranking: &[usize]) -> Result<SearchOutcome> {
    let mut s = Searcher::new(cfg, data, ranking)?;
    let arch = s.run(None)?;
    Ok(SearchOutcome {
        arch,
        log: s.log,
        history: s.history,
        supernet: s.supernet,
    })
}
