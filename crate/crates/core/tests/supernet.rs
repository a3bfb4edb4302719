mod common;

use common::rng;
use proptest::prelude::*;
use prunas_core::nn::{BlockSpec, OperatorSpec};
use prunas_core::nn::{ForwardCtx, Mode, Scaffold, SpaceSpec, Stage};
use prunas_core::supernet::{
    argmax_alive, cost_penalty, gumbel_noise, gumbel_sample, gumbel_softmax, gumbel_softmax_var, prune_count,
    ArchParams, CandidateGrid, Supernet,
};
use prunas_tensor::{finite_diff_check, Graph, Precision, Tensor, TensorError};
use rand::Rng;

fn small_scaffold() -> Scaffold {
    Scaffold::new([1, 8, 8], 4, vec![Stage(1, 8, 2), Stage(1, 8, 1)], 3).unwrap()
}

fn mobile(seed: u64) -> Supernet {
    Supernet::build(
        &SpaceSpec::preset("mobile").unwrap(),
        small_scaffold(),
        5.0,
        &mut rng(seed),
    )
    .unwrap()
}

fn input(seed: u64) -> Tensor {
    Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng(seed))
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax_freq(a: &[f64], tau: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut hits = vec![0usize; a.len()];
    for _ in 0..n {
        let p = gumbel_sample(a, tau, &mut r).unwrap();
        let j = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        hits[j] += 1;
    }
    hits.into_iter().map(|h| h as f64 / n as f64).collect()
}

#[test]
fn gumbel_max_law() {
    let cases: Vec<(Vec<f64>, Vec<f64>)> = vec![
        (vec![0.0, 0.0], vec![0.5, 0.5]),
        (vec![3f64.ln(), 0.0], vec![0.75, 0.25]),
    ];
    for (i, (a, want)) in cases.iter().enumerate() {
        let f = argmax_freq(a, 1.0, 10_000, 10 + i as u64);
        for (x, w) in f.iter().zip(want) {
            assert!((x - w).abs() <= 0.02, "{a:?}: {f:?}");
        }
    }
    // the law does not depend on the temperature
    let a = [0.4, -1.2, 1.5, 0.0, -0.3];
    let want = softmax(&a);
    for (i, tau) in [0.3, 5.0].iter().enumerate() {
        let f = argmax_freq(&a, *tau, 10_000, 20 + i as u64);
        for (x, w) in f.iter().zip(&want) {
            assert!((x - w).abs() <= 0.02, "tau {tau}: {f:?} vs {want:?}");
        }
    }
}

#[test]
fn gumbel_rejects_bad_temperature() {
    assert!(gumbel_softmax(&[0.0, 1.0], 0.0, &[0.0, 0.0]).is_err());
    assert!(gumbel_softmax(&[0.0, 1.0], -1.0, &[0.0, 0.0]).is_err());
    assert!(gumbel_softmax(&[0.0, 1.0], 1.0, &[0.0]).is_err());
}

#[test]
fn presets_have_six_candidates_and_uniform_logits() {
    for name in ["mobile", "shuffle"] {
        let s = Supernet::build(
            &SpaceSpec::preset(name).unwrap(),
            small_scaffold(),
            5.0,
            &mut rng(1),
        )
        .unwrap();
        assert_eq!(s.grid.alive_counts(), vec![6; s.layers()], "{name}");
        for l in 0..s.layers() {
            let p = softmax(&s.arch.alive_logits(&s.grid, l));
            assert!(p.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        }
    }
}

#[test]
fn uniform_cost_is_candidate_mean() {
    let s = mobile(2);
    let alive = s.grid.alive_all();
    let p: Vec<Vec<f64>> = alive
        .iter()
        .map(|a| vec![1.0 / a.len() as f64; a.len()])
        .collect();
    let c = s.costs.expected(&p, &alive).unwrap();
    let mean: f64 = s.costs.fixed as f64
        + s.costs
            .layers
            .iter()
            .map(|row| row.iter().sum::<u64>() as f64 / row.len() as f64)
            .sum::<f64>();
    assert!((c - mean).abs() < 1e-6, "{c} vs {mean}");
    for j in 0..6 {
        let one: Vec<Vec<f64>> = alive
            .iter()
            .map(|a| (0..a.len()).map(|k| if k == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let c = s.costs.expected(&one, &alive).unwrap();
        assert_eq!(c, s.costs.single_path(&vec![j; s.layers()]).unwrap() as f64);
    }
}

#[test]
fn two_candidate_expectation() {
    let costs = prunas_core::supernet::CostTable {
        layers: vec![vec![10, 30]],
        fixed: 0,
    };
    let c = costs.expected(&[vec![0.5, 0.5]], &[vec![0, 1]]).unwrap();
    assert_eq!(c, 20.0);
}

#[test]
fn penalty_values() {
    assert!((cost_penalty(100.0, 100.0, 1.0) - 0.05).abs() < 1e-15);
    assert!((cost_penalty(std::f64::consts::E * 7.0, 7.0, 1.0) - 1.0).abs() < 1e-12);
    assert!((cost_penalty(std::f64::consts::E.powi(2) * 7.0, 7.0, 2.0) - 4.0).abs() < 1e-12);
    assert_eq!(cost_penalty(10.0, 100.0, 0.0), 1.0);
}

#[test]
fn one_hot_mixture_is_the_lone_candidate() {
    let s = mobile(3);
    let x = input(4);
    for j in [0, 3, 5] {
        let mut g = Graph::new(Precision::F32);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::new(&mut g, Mode::Train);
        let p: Vec<Vec<f64>> = (0..s.layers())
            .map(|_| (0..6).map(|k| if k == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let pv = s.constant_mixture(&mut ctx, &p);
        let y = s.forward(&mut ctx, xv, &pv).unwrap();
        let mixed = g.value(y).clone();

        let mut g = Graph::new(Precision::F32);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::new(&mut g, Mode::Train);
        let mut h = s.backbone.stem(&mut ctx, xv).unwrap();
        for l in 0..s.layers() {
            h = s
                .candidate(l, j)
                .unwrap()
                .forward(&mut ctx, &format!("l{l}.c{j}."), h)
                .unwrap();
        }
        let y = s.backbone.head(&mut ctx, h).unwrap();
        assert_eq!(mixed.data(), g.value(y).data(), "candidate {j}");
    }
}

#[test]
fn half_mixture_is_the_mean() {
    let space = SpaceSpec::new(
        vec![BlockSpec::InvertedResidual { expand: 1 }, BlockSpec::Skip],
        vec![OperatorSpec::depthwise(3)],
    );
    let scaffold = Scaffold::new([1, 8, 8], 4, vec![Stage(1, 4, 1)], 3).unwrap();
    let s = Supernet::build(&space, scaffold, 1.0, &mut rng(5)).unwrap();
    let x = input(6);
    let mut g = Graph::new(Precision::F64);
    let xv = g.constant(x);
    let mut ctx = ForwardCtx::new(&mut g, Mode::Train);
    let pv = s.constant_mixture(&mut ctx, &[vec![0.5, 0.5]]);
    let mixed = s.forward(&mut ctx, xv, &pv).unwrap();
    let h = s.backbone.stem(&mut ctx, xv).unwrap();
    let a = s.candidate(0, 0).unwrap().forward(&mut ctx, "l0.c0.", h).unwrap();
    let b = s.candidate(0, 1).unwrap().forward(&mut ctx, "l0.c1.", h).unwrap();
    let sum = ctx.graph.add(a, b).unwrap();
    let mean = ctx.graph.scale(sum, 0.5).unwrap();
    let want = s.backbone.head(&mut ctx, mean).unwrap();
    let (u, v) = (g.value(mixed).data(), g.value(want).data());
    for i in 0..u.len() {
        assert!((u[i] - v[i]).abs() < 1e-6, "{} vs {}", u[i], v[i]);
    }
}

#[test]
fn forward_rejects_misaligned_mixture() {
    let s = mobile(7);
    let mut g = Graph::new(Precision::F32);
    let xv = g.constant(input(8));
    let mut ctx = ForwardCtx::new(&mut g, Mode::Train);
    let pv = s.constant_mixture(&mut ctx, &vec![vec![0.2; 5]; s.layers()]);
    assert!(s.forward(&mut ctx, xv, &pv).is_err());
    let pv = s.constant_mixture(&mut ctx, &[vec![1.0 / 6.0; 6]]);
    assert!(s.forward(&mut ctx, xv, &pv).is_err());
}

#[test]
fn pruned_candidates_are_skipped() {
    let mut s = mobile(9);
    for l in 0..s.layers() {
        s.arch.logits[l] = vec![0.5, -1.0, 2.0, 0.1, 0.0, 0.3];
    }
    let before = s.param_count();
    s.prune(0.4, false).unwrap();
    assert!(s.param_count() < before);
    for l in 0..s.layers() {
        assert_eq!(s.grid.alive(l), vec![0, 2, 3, 5]);
        assert!(s.candidate(l, 1).is_none() && s.candidate(l, 4).is_none());
    }
    let mut g = Graph::new(Precision::F32);
    let xv = g.constant(input(10));
    let mut ctx = ForwardCtx::new(&mut g, Mode::Train);
    let pv = s.constant_mixture(&mut ctx, &vec![vec![0.25; 4]; s.layers()]);
    s.forward(&mut ctx, xv, &pv).unwrap();
    // no parameter of a dead candidate reaches the graph
    assert!(ctx
        .bound()
        .iter()
        .all(|(n, _)| !n.contains(".c1.") && !n.contains(".c4.")));
}

#[test]
fn cost_gradient_matches_finite_differences() {
    let s = mobile(11);
    let alive = s.grid.alive_all();
    let mut r = rng(12);
    let noise: Vec<Vec<f64>> = alive.iter().map(|a| gumbel_noise(a.len(), &mut r)).collect();
    let logits: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let tau = 2.0;
    let err = finite_diff_check(
        |g, a| {
            let p: Vec<_> = noise
                .iter()
                .map(|n| gumbel_softmax_var(g, a, tau, n))
                .collect::<Result<_, _>>()
                .map_err(|e| TensorError::GradCheck(e.to_string()))?;
            let c = s
                .costs
                .expected_var(g, &p, &alive)
                .map_err(|e| TensorError::GradCheck(e.to_string()))?;
            g.scale(c, 1e-4)
        },
        &Tensor::from_vec(logits),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn prune_trace_six_four_three_two() {
    let mut s = mobile(13);
    let mut r = rng(14);
    for l in 0..s.layers() {
        s.arch.logits[l] = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
    }
    let mut trace = vec![s.grid.alive_counts()];
    for step in 1..=3 {
        let best = s.choices();
        s.prune(0.4, step == 3).unwrap();
        assert_eq!(s.choices(), best, "argmax pruned at step {step}");
        trace.push(s.grid.alive_counts());
    }
    let n = s.layers();
    assert_eq!(trace, vec![vec![6; n], vec![4; n], vec![3; n], vec![2; n]]);
    let d = s.derive(1, "h").unwrap();
    for (l, choice) in d.layers.iter().enumerate() {
        let j = s.choices()[l];
        let top = s
            .grid
            .alive(l)
            .iter()
            .map(|&k| s.arch.logits[l][k])
            .fold(f64::MIN, f64::max);
        assert_eq!(s.arch.logits[l][j], top);
        assert_eq!((choice.block, choice.op), s.grid.candidates[j]);
    }
    assert_eq!(d.flops, d.compute_flops().unwrap());
}

/// Survivors by sorting (logit descending, index ascending) and keeping a prefix.
fn oracle_survivors(logits: &[f64], alive: &[usize], kill: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = alive.iter().map(|&j| (logits[j], j)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = pairs[..pairs.len() - kill].iter().map(|p| p.1).collect();
    keep.sort();
    keep
}

#[test]
fn prune_agrees_with_sort_oracle() {
    let c = (BlockSpec::Skip, OperatorSpec::depthwise(3));
    let mut r = rng(15);
    for trial in 0..100 {
        let n = r.random_range(2..9);
        let layers = 3;
        let mut grid = CandidateGrid::new(vec![c; n], layers).unwrap();
        // coarse values force ties on some trials
        let logits: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..n).map(|_| (r.random_range(-3i32..3) as f64) * 0.5).collect())
            .collect();
        let arch = ArchParams {
            logits: logits.clone(),
            tau: 1.0,
        };
        for step in 0..3 {
            let final_step = step == 2;
            let want: Vec<Vec<usize>> = (0..layers)
                .map(|l| {
                    let alive = grid.alive(l);
                    oracle_survivors(&logits[l], &alive, prune_count(alive.len(), 0.4, final_step))
                })
                .collect();
            prunas_core::supernet::grid::prune(&mut grid, &arch, 0.4, final_step).unwrap();
            assert_eq!(grid.alive_all(), want, "trial {trial} step {step}");
        }
        for l in 0..layers {
            let alive = grid.alive(l);
            let pick = argmax_alive(&logits[l], &alive).unwrap();
            let top = alive.iter().map(|&j| logits[l][j]).fold(f64::MIN, f64::max);
            let first = *alive.iter().find(|&&j| logits[l][j] == top).unwrap();
            assert_eq!(pick, first, "trial {trial} layer {l}");
        }
    }
}

#[test]
fn derive_is_shift_invariant() {
    let mut s = mobile(16);
    let mut r = rng(17);
    for l in 0..s.layers() {
        s.arch.logits[l] = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    }
    let before = s.choices();
    for l in 0..s.layers() {
        s.arch.logits[l].iter_mut().for_each(|v| *v += 3.25);
    }
    assert_eq!(s.choices(), before);
}

proptest! {
    #[test]
    fn gumbel_softmax_is_a_simplex(a in prop::collection::vec(-10.0f64..10.0, 1..8), tau in 0.05f64..10.0, seed in 0u64..500) {
        let noise = gumbel_noise(a.len(), &mut rng(seed));
        let p = gumbel_softmax(&a, tau, &noise).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn prune_count_bounds(alive in 0usize..40, ratio in 0.01f64..0.99, fin in any::<bool>()) {
        let k = prune_count(alive, ratio, fin);
        if alive < 2 {
            prop_assert_eq!(k, 0);
        } else {
            prop_assert!(k < alive);
            prop_assert!(k >= (ratio * alive as f64).floor() as usize || k == alive - 1);
            if fin { prop_assert!(k >= 1); }
        }
    }

    #[test]
    fn mass_to_costlier_candidate_raises_cost(c0 in 0u64..10_000, extra in 1u64..10_000, w in 0.0f64..0.9, shift in 0.01f64..0.1) {
        let costs = prunas_core::supernet::CostTable { layers: vec![vec![c0, c0 + extra]], fixed: 5 };
        let alive = [vec![0, 1]];
        let a = costs.expected(&[vec![1.0 - w, w]], &alive).unwrap();
        let b = costs.expected(&[vec![1.0 - w - shift, w + shift]], &alive).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn alive_counts_never_grow(raw in prop::collection::vec(-2.0f64..2.0, 12), ratio in 0.1f64..0.9) {
        let c = (BlockSpec::Skip, OperatorSpec::depthwise(3));
        let mut grid = CandidateGrid::new(vec![c; 6], 2).unwrap();
        let arch = ArchParams { logits: vec![raw[..6].to_vec(), raw[6..].to_vec()], tau: 1.0 };
        let mut prev = grid.alive_all();
        for step in 0..4 {
            prunas_core::supernet::grid::prune(&mut grid, &arch, ratio, step == 3).unwrap();
            let now = grid.alive_all();
            for (p, n) in prev.iter().zip(&now) {
                prop_assert!(!n.is_empty());
                prop_assert!(n.iter().all(|j| p.contains(j)));
            }
            prev = now;
        }
    }
}
