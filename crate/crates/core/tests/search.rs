mod common;

use prunas_core::data::{Dataset, SynthSpec};
use prunas_core::nn::{BlockSpec, ForwardCtx, Mode, OperatorSpec, SpaceSpec, Stage};
use prunas_core::search::{
    ablate, ablation_csv, default_fit, finetune, phases, run_search, AblationMode, ArchNorm, SearchConfig,
    SearchLog, Searcher, SpaceRef,
};
use prunas_core::supernet::{prune_count, ArchDescriptor, LayerChoice, Supernet};
use prunas_core::train;
use prunas_core::Error;
use prunas_tensor::{Graph, Precision, Tensor};

fn tiny_space(blocks: Vec<BlockSpec>, ops: Vec<OperatorSpec>) -> SpaceSpec {
    SpaceSpec::new(blocks, ops).with_stages(4, vec![Stage(1, 8, 2), Stage(1, 8, 1)])
}

fn mobile_tiny() -> SpaceSpec {
    let s = SpaceSpec::preset("mobile").unwrap();
    tiny_space(s.blocks, s.operators)
}

fn config(space: SpaceSpec, seed: u64) -> SearchConfig {
    let mut c = SearchConfig::new(SpaceRef::Inline(space), 2e4);
    c.warmup_epochs = 1;
    c.epochs_per_step = 1;
    c.batch_size = 16;
    c.per_class_val = 4;
    c.seed = seed;
    c
}

fn data(classes: usize, per_class: usize, seed: u64) -> Dataset {
    SynthSpec::ascending(classes, per_class, 0.1, 0.6, 8, seed)
        .generate()
        .unwrap()
}

fn identity(k: usize) -> Vec<usize> {
    (0..k).collect()
}

#[test]
fn forwards_follow_the_closed_form() {
    let d = data(10, 12, 0);
    for interleave in [false, true] {
        let mut cfg = config(mobile_tiny(), 1);
        cfg.interleave = interleave;
        let mut s = Searcher::new(&cfg, &d, &identity(10)).unwrap();
        let plan = s.planned_forwards();
        s.run(None).unwrap();
        let got: Vec<(u64, u64, u64)> = s
            .log
            .rows
            .iter()
            .map(|r| (r.train_forwards, r.val_forwards, r.candidate_forwards))
            .collect();
        assert_eq!(got, plan, "interleave {interleave}");
        for r in &s.log.rows {
            assert_eq!(r.sample_forwards, r.train_forwards + r.val_forwards);
        }
    }
}

#[test]
fn warmup_accounting_and_frozen_logits() {
    let d = data(10, 12, 2);
    let mut cfg = config(mobile_tiny(), 2);
    cfg.warmup_epochs = 2;
    let mut s = Searcher::new(&cfg, &d, &identity(10)).unwrap();
    let warm = s.phases()[0];
    assert!(warm.is_warmup());
    let (train, _) = s.subsets(warm.classes).unwrap();
    let mut hook_logits = Vec::new();
    let mut hook = |step: usize, net: &Supernet| {
        hook_logits.push((step, net.arch.logits.clone()));
        Ok(())
    };
    s.run(Some(&mut hook)).unwrap();
    let warm_rows: Vec<_> = s.log.rows.iter().filter(|r| r.phase == "warmup").collect();
    assert_eq!(warm_rows.len(), 2);
    assert_eq!(warm_rows[1].sample_forwards, 2 * train.len() as u64);
    assert!(warm_rows
        .iter()
        .all(|r| r.val_loss.is_none() && r.val_forwards == 0));
    assert_eq!(hook_logits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![1, 2, 3]);
}

#[test]
fn warmup_alone_leaves_logits_untouched_and_learns_easy_pair() {
    let d = SynthSpec {
        classes: 2,
        per_class: 40,
        sigma: vec![0.05, 0.05],
        image_size: 8,
        seed: 3,
    }
    .generate()
    .unwrap();
    let mut cfg = config(mobile_tiny(), 3);
    cfg.class_schedule = vec![1.0];
    cfg.steps = 0;
    cfg.warmup_epochs = 8;
    let mut s = Searcher::new(&cfg, &d, &identity(2)).unwrap();
    let before = s.supernet.arch.logits.clone();
    s.run(None).unwrap();
    assert_eq!(s.supernet.arch.logits, before);

    let train = s.split().train.clone();
    let net = &s.supernet;
    let p: Vec<Vec<f64>> = net
        .grid
        .alive_counts()
        .iter()
        .map(|&n| vec![1.0 / n as f64; n])
        .collect();
    let ids: Vec<usize> = (0..train.len()).collect();
    let (x, y) = train.batch(&ids).unwrap();
    let mut g = Graph::new(Precision::F32);
    let xv = g.constant(x);
    let mut ctx = ForwardCtx::new(&mut g, Mode::Eval);
    let pv = net.constant_mixture(&mut ctx, &p);
    let out = net.forward(&mut ctx, xv, &pv).unwrap();
    let logits = g.value(out);
    let k = 2;
    let correct = (0..y.len())
        .filter(|&i| train::argmax(&logits.data()[i * k..(i + 1) * k]) == y[i])
        .count();
    let acc = correct as f64 / y.len() as f64;
    assert!(acc >= 0.9, "train accuracy after warmup {acc}");
}

#[test]
fn alternation_is_strict() {
    let d = data(4, 12, 4);
    let mut cfg = config(mobile_tiny(), 4);
    cfg.class_schedule = vec![0.5, 1.0];
    cfg.steps = 1;
    let mut s = Searcher::new(&cfg, &d, &identity(4)).unwrap();
    let train = s.split().train.clone();
    let val = s.split().val.clone();
    let snapshot = |s: &mut Searcher| -> Vec<(String, Tensor)> {
        s.supernet
            .params_mut()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    };
    for norm in [ArchNorm::Batch, ArchNorm::Running] {
        s.cfg.arch_norm = norm;
        let logits = s.supernet.arch.logits.clone();
        let w0 = snapshot(&mut s);
        s.weight_step(&train, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(s.supernet.arch.logits, logits, "weight pass moved logits");
        assert_ne!(snapshot(&mut s), w0, "weight pass left weights alone");

        let w1 = snapshot(&mut s);
        let ids: Vec<usize> = (0..val.len()).collect();
        s.arch_step(&val, &ids).unwrap();
        assert_eq!(snapshot(&mut s), w1, "arch pass moved weights ({norm:?})");
        assert_ne!(s.supernet.arch.logits, logits, "arch pass left logits alone");
    }
}

#[test]
fn arch_pass_binds_weights_without_gradient() {
    let d = data(3, 8, 5);
    let cfg = config(mobile_tiny(), 5);
    let net = Supernet::build(
        &cfg.space.resolve().unwrap(),
        prunas_core::nn::Scaffold::new(d.sample_shape(), 4, vec![Stage(1, 8, 2), Stage(1, 8, 1)], 3).unwrap(),
        5.0,
        &mut common::rng(5),
    )
    .unwrap();
    let (x, _) = d.batch(&[0, 1, 2, 3]).unwrap();
    let mut g = Graph::new(Precision::F32);
    let xv = g.constant(x);
    let mut ctx = ForwardCtx::new(&mut g, Mode::Train).frozen();
    let pv = net.constant_mixture(&mut ctx, &vec![vec![1.0 / 6.0; 6]; net.layers()]);
    net.forward(&mut ctx, xv, &pv).unwrap();
    let bound = ctx.bound().to_vec();
    assert!(!bound.is_empty());
    assert!(bound.iter().all(|(_, v)| !g.requires_grad(*v)));
}

#[test]
fn identical_runs_are_byte_identical() {
    let d = data(10, 12, 6);
    let cfg = config(mobile_tiny(), 6);
    let a = run_search(&cfg, &d, &identity(10)).unwrap();
    let b = run_search(&cfg, &d, &identity(10)).unwrap();
    assert_eq!(a.arch.to_json().unwrap(), b.arch.to_json().unwrap());
    assert_eq!(a.log.to_csv().unwrap(), b.log.to_csv().unwrap());
    let mut other = cfg.clone();
    other.seed = 7;
    let c = run_search(&other, &d, &identity(10)).unwrap();
    assert_ne!(a.log.to_csv().unwrap(), c.log.to_csv().unwrap());
}

#[test]
fn single_candidate_space_never_prunes() {
    let d = data(10, 12, 8);
    let space = tiny_space(
        vec![BlockSpec::InvertedResidual { expand: 3 }],
        vec![OperatorSpec::depthwise(3)],
    );
    let out = run_search(&config(space, 8), &d, &identity(10)).unwrap();
    assert!(out.log.rows.iter().all(|r| r.alive_counts() == vec![1, 1]));
    assert!(out
        .arch
        .layers
        .iter()
        .all(|c| c.block == BlockSpec::InvertedResidual { expand: 3 } && c.op == OperatorSpec::depthwise(3)));
}

#[test]
fn alive_trace_follows_prune_arithmetic() {
    let d = data(10, 12, 9);
    let cfg = config(mobile_tiny(), 9);
    let out = run_search(&cfg, &d, &identity(10)).unwrap();
    // rows record the alive counts during the epoch, before that step's pruning
    let mut expect = 6;
    for step in 1..=cfg.steps {
        let row = out.log.rows.iter().find(|r| r.step == step).unwrap();
        assert_eq!(row.alive_counts(), vec![expect; 2], "step {step}");
        expect -= prune_count(expect, cfg.prune_ratio, step == cfg.steps);
    }
    assert_eq!(out.supernet.grid.alive_counts(), vec![2, 2]);
    let choices = out.supernet.choices();
    for (l, c) in out.arch.layers.iter().enumerate() {
        let alive = out.supernet.grid.alive(l);
        let best = alive
            .iter()
            .copied()
            .max_by(|a, b| {
                out.arch.logits[l][*a]
                    .total_cmp(&out.arch.logits[l][*b])
                    .then(b.cmp(a))
            })
            .unwrap();
        assert_eq!(choices[l], best);
        assert_eq!((c.block, c.op), out.supernet.grid.candidates[best]);
    }
    assert_eq!(out.arch.flops, out.arch.compute_flops().unwrap());
    // logit history has one row per alive candidate per layer per step
    let per_step: Vec<usize> = (1..=3)
        .map(|s| out.history.iter().filter(|h| h.step == s).count())
        .collect();
    assert_eq!(per_step, vec![12, 8, 6]);
}

#[test]
fn baseline_switches_keep_every_class_and_candidate() {
    let d = data(10, 12, 10);
    let mut cfg = config(mobile_tiny(), 10);
    cfg.schedule = false;
    cfg.prune = false;
    let out = run_search(&cfg, &d, &identity(10)).unwrap();
    assert!(out
        .log
        .rows
        .iter()
        .all(|r| r.classes == 10 && r.alive_counts() == vec![6, 6]));
    assert!(phases(&cfg, 10).iter().all(|p| p.classes == 10));

    let sched = run_search(&config(mobile_tiny(), 10), &d, &identity(10)).unwrap();
    assert!(sched.log.sample_forwards() < out.log.sample_forwards());
}

#[test]
fn zero_gamma_penalty_is_one() {
    let d = data(4, 12, 11);
    let mut cfg = config(mobile_tiny(), 11);
    cfg.gamma = 0.0;
    cfg.class_schedule = vec![0.5, 1.0];
    cfg.steps = 1;
    let out = run_search(&cfg, &d, &identity(4)).unwrap();
    assert!(out.log.rows.iter().all(|r| r.penalty == 1.0));
}

#[test]
fn divergence_is_reported_with_partial_log() {
    let d = data(4, 12, 12);
    let mut cfg = config(mobile_tiny(), 12);
    cfg.class_schedule = vec![0.5, 1.0];
    cfg.steps = 1;
    cfg.warmup_epochs = 3;
    cfg.lr_weights = 1e30;
    let mut s = Searcher::new(&cfg, &d, &identity(4)).unwrap();
    let err = s.run(None).unwrap_err();
    match err {
        Error::Diverged { step, .. } => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other}"),
    }
    // epochs finished before the failure stay in the log
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.csv");
    s.log.save(&p).unwrap();
    assert_eq!(SearchLog::load(&p).unwrap(), s.log);
}

#[test]
fn bad_ranking_is_rejected() {
    let d = data(4, 6, 13);
    let mut cfg = config(mobile_tiny(), 13);
    cfg.class_schedule = vec![0.5, 1.0];
    cfg.steps = 1;
    assert!(Searcher::new(&cfg, &d, &[0, 1, 2]).is_err());
    assert!(Searcher::new(&cfg, &d, &[0, 1, 1, 3]).is_err());
}

fn skip_arch(d: &Dataset) -> ArchDescriptor {
    let scaffold =
        prunas_core::nn::Scaffold::new(d.sample_shape(), 4, vec![Stage(1, 4, 1)], d.num_classes()).unwrap();
    let mut a = ArchDescriptor {
        layers: vec![LayerChoice {
            block: BlockSpec::Skip,
            op: OperatorSpec::depthwise(3),
        }],
        flops: 0,
        ref_input: d.sample_shape(),
        seed: 0,
        config_hash: String::new(),
        logits: vec![vec![0.0]],
        scaffold,
    };
    a.flops = a.compute_flops().unwrap();
    a
}

#[test]
fn skip_only_architecture_learns_separable_data() {
    // the head pools globally, so classes differ by mean intensity
    let mut r = common::rng(14);
    let (per, side) = (40, 8);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..per {
            let t = Tensor::randn(&[side * side], 0.1, &mut r);
            images.extend(t.data().iter().map(|v| v + c as f64 - 1.0));
            labels.push(c);
        }
    }
    let d = Dataset::new(images, [1, side, side], labels, 3, Default::default()).unwrap();
    let split = d.split_train_val(10, 14).unwrap();
    let arch = skip_arch(&d);
    let (_, m) = finetune(&arch, &split, &default_fit(15, 14)).unwrap();
    assert!(m.top1 >= 0.95, "top-1 {}", m.top1);
    assert_eq!(m.flops, arch.flops);
    let (_, again) = finetune(&arch, &split, &default_fit(15, 14)).unwrap();
    assert_eq!(m, again);
}

#[test]
fn finetune_rejects_mismatched_data() {
    let d = data(3, 10, 15);
    let arch = skip_arch(&d);
    let other = SynthSpec::ascending(3, 10, 0.1, 0.5, 10, 15).generate().unwrap();
    assert!(finetune(&arch, &other.split_train_val(2, 0).unwrap(), &default_fit(1, 0)).is_err());
    let four = data(4, 10, 15);
    assert!(finetune(&arch, &four.split_train_val(2, 0).unwrap(), &default_fit(1, 0)).is_err());
}

#[test]
fn ablation_accounting() {
    let d = data(10, 12, 16);
    let cfg = config(mobile_tiny(), 16);
    let modes = [
        AblationMode::EasyToAll,
        AblationMode::HardToAll,
        AblationMode::SmallOnly,
        AblationMode::AllOnly,
    ];
    let rows = ablate(&cfg, &d, &identity(10), &modes, &default_fit(1, 16)).unwrap();
    let sf: Vec<u64> = rows.iter().map(|r| r.sample_forwards).collect();
    assert_eq!(sf[0], sf[1], "easy and hard subsets have equal sizes");
    assert!(sf[0] < sf[3]);
    assert!(sf[2] < sf[0]);
    let csv = ablation_csv(&rows).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("mode,seed,top1,flops,params,sample_forwards,candidate_forwards"));
    for m in modes {
        assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
    }
}
