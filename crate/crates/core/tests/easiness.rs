use proptest::prelude::*;
use prunas_core::data::SynthSpec;
use prunas_core::easiness::{
    aggregate_profiles, confusion_matrix, profile_with_reference, rank_classes, read_prediction_log,
    sample_entropy, spearman, EasinessProfile, DEFAULT_BINS,
};

#[test]
fn entropy_corner_values() {
    assert_eq!(sample_entropy(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
    let h = sample_entropy(&[0.1; 10]).unwrap();
    assert!((h - std::f64::consts::LN_10).abs() < 1e-9, "{h}");
    let h = sample_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap();
    assert!((h - std::f64::consts::LN_2).abs() < 1e-12, "{h}");
}

#[test]
fn profile_matches_hand_computed_scores() {
    let probs = vec![
        vec![0.9, 0.05, 0.05],
        vec![0.7, 0.2, 0.1],
        vec![0.2, 0.6, 0.2],
        vec![1.0 / 3.0; 3],
    ];
    let labels = [0, 0, 1, 2];
    let p = EasinessProfile::from_predictions(&probs, &labels, 3, 8, "hand").unwrap();
    let h = |v: &[f64]| -> f64 { v.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum() };
    let want = [(h(&probs[0]) + h(&probs[1])) / 2.0, h(&probs[2]), 3f64.ln()];
    for (c, w) in want.iter().enumerate() {
        assert!((p.per_class[c].score - w).abs() < 1e-12, "class {c}");
        assert_eq!(p.per_class[c].n, labels.iter().filter(|l| **l == c).count());
    }
    assert_eq!(p.ranking, vec![0, 1, 2]);
    let top = 3f64.ln();
    let bin = |e: f64| ((e / top * 8.0) as usize).min(7);
    assert_eq!(p.per_class[1].counts[bin(h(&probs[2]))], 1.0);
    assert!((p.bins[8] - top).abs() < 1e-15 && p.bins[0] == 0.0);
}

#[test]
fn empty_class_ranks_hardest_with_warning() {
    let probs = vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1]];
    let p = EasinessProfile::from_predictions(&probs, &[0, 1], 3, 8, "n").unwrap();
    assert_eq!(p.ranking[2], 2);
    assert!((p.per_class[2].score - 3f64.ln()).abs() < 1e-12);
    assert_eq!(p.warnings.len(), 1);
}

#[test]
fn malformed_predictions_are_rejected() {
    assert!(EasinessProfile::from_predictions(&[vec![0.5, 0.5]], &[0], 2, 2, "n").is_err());
    assert!(EasinessProfile::from_predictions(&[vec![0.5, 0.5]], &[0, 1], 2, 8, "n").is_err());
    assert!(EasinessProfile::from_predictions(&[vec![0.5, 0.5]], &[2], 2, 8, "n").is_err());
    assert!(EasinessProfile::from_predictions(&[vec![0.5, 0.6]], &[0], 2, 8, "n").is_err());
}

#[test]
fn reversing_scores_reverses_ranking() {
    let s = [0.4, 0.1, 0.9, 0.3, 0.7];
    let r = rank_classes(&s);
    let neg: Vec<f64> = s.iter().map(|x| -x).collect();
    let mut back = rank_classes(&neg);
    back.reverse();
    assert_eq!(r, back);
}

fn profile(scores: &[f64], counts: &[f64]) -> EasinessProfile {
    let mut p = EasinessProfile::from_predictions(&[], &[], scores.len(), 4, "p").unwrap();
    for (c, s) in p.per_class.iter_mut().zip(scores) {
        c.score = *s;
        c.counts = counts.to_vec();
    }
    p.ranking = rank_classes(scores);
    p.warnings.clear();
    p
}

#[test]
fn aggregation_is_order_invariant() {
    let a = profile(&[0.2, 0.8, 0.5], &[1.0, 0.0, 2.0, 0.0]);
    let b = profile(&[0.4, 0.6, 0.1], &[0.0, 3.0, 0.0, 1.0]);
    let c = profile(&[0.9, 0.3, 0.2], &[2.0, 2.0, 0.0, 0.0]);
    let x = aggregate_profiles(&[a.clone(), b.clone(), c.clone()]).unwrap();
    let y = aggregate_profiles(&[c, a, b]).unwrap();
    assert_eq!(x.ranking, y.ranking);
    for (p, q) in x.per_class.iter().zip(&y.per_class) {
        assert!((p.score - q.score).abs() < 1e-12);
        for (u, v) in p.counts.iter().zip(&q.counts) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    assert_eq!(x.per_class[0].counts, vec![1.0, 5.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
    assert!(aggregate_profiles(&[]).is_err());
}

#[test]
fn confusion_conserves_rows() {
    let probs = vec![
        vec![0.9, 0.1, 0.0],
        vec![0.2, 0.7, 0.1],
        vec![0.6, 0.3, 0.1],
        vec![0.1, 0.1, 0.8],
        vec![0.1, 0.1, 0.8],
    ];
    let labels = [0, 1, 1, 2, 2];
    let m = confusion_matrix(&probs, &labels, &[0, 1, 2]);
    assert_eq!(m, vec![vec![1, 0, 0], vec![1, 1, 0], vec![0, 0, 2]]);
    // rows and columns follow the given order
    let m = confusion_matrix(&probs, &labels, &[2, 0, 1]);
    assert_eq!(m, vec![vec![2, 0, 0], vec![0, 1, 0], vec![0, 1, 1]]);
    let perfect: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..3).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect();
    assert_eq!(
        confusion_matrix(&perfect, &labels, &[0, 1, 2]),
        vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]
    );
}

#[test]
fn prediction_log_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("preds.csv");
    std::fs::write(
        &path,
        "sample_id,true_label,p_0,p_1\n0,0,0.9,0.1\n1,1,0.5,0.5\n2,1,0.0,1.0\n",
    )
    .unwrap();
    let (probs, labels) = read_prediction_log(&path).unwrap();
    assert_eq!(labels, vec![0, 1, 1]);
    assert_eq!(probs[1], vec![0.5, 0.5]);
    let p = EasinessProfile::from_predictions(&probs, &labels, 2, 8, "log").unwrap();
    assert_eq!(p.ranking, vec![0, 1]);

    std::fs::write(&path, "0,0,0.9,0.1\n1,x,0.5,0.5\n").unwrap();
    assert!(read_prediction_log(&path).is_err());
}

#[test]
fn profile_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.json");
    let p = profile(&[0.3, 0.1, 0.2], &[1.0, 0.0, 0.0, 0.0]);
    p.save(&path).unwrap();
    assert_eq!(EasinessProfile::load(&path).unwrap(), p);

    let mut bad = p.clone();
    bad.ranking = vec![0, 0, 1];
    bad.save(&path).unwrap();
    assert!(EasinessProfile::load(&path).is_err());
}

#[test]
fn separable_pair_profiles_near_zero() {
    let data = SynthSpec {
        classes: 2,
        per_class: 30,
        sigma: vec![0.05, 0.05],
        image_size: 8,
        seed: 3,
    }
    .generate()
    .unwrap();
    let p = profile_with_reference(&data, 0, 30, DEFAULT_BINS, 3).unwrap();
    for c in &p.per_class {
        assert!(c.score < 0.1, "class {} score {}", c.class, c.score);
        assert_eq!(c.counts.iter().sum::<f64>(), 30.0);
    }
}

#[test]
fn planted_difficulty_is_recovered() {
    let data = SynthSpec::ascending(6, 30, 0.1, 1.0, 10, 1).generate().unwrap();
    let p = aggregate_profiles(&[
        profile_with_reference(&data, 0, 25, DEFAULT_BINS, 1).unwrap(),
        profile_with_reference(&data, 1, 25, DEFAULT_BINS, 1).unwrap(),
    ])
    .unwrap();
    let planted: Vec<f64> = (0..6).map(|c| c as f64).collect();
    let rho = spearman(&p.scores(), &planted);
    assert!(rho >= 0.8, "spearman {rho}, scores {:?}", p.scores());
}

proptest! {
    #[test]
    fn entropy_is_bounded(raw in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 1e-6);
        let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let h = sample_entropy(&p).unwrap();
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn spearman_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 3..20), seed in 0u64..1000) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| ((i as u64 * 31 + seed) % 17) as f64 - x).collect();
        let r = spearman(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let self_r = spearman(&a, &a);
        prop_assert!(self_r == 0.0 || (self_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histograms_conserve_samples(labels in prop::collection::vec(0usize..4, 1..40)) {
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let w: Vec<f64> = (0..4).map(|c| 1.0 + ((i * 7 + c * 3) % 5) as f64).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let p = EasinessProfile::from_predictions(&probs, &labels, 4, 16, "prop").unwrap();
        for c in &p.per_class {
            let n = labels.iter().filter(|l| **l == c.class).count();
            prop_assert_eq!(c.counts.iter().sum::<f64>(), n as f64);
        }
        let mut sorted = p.ranking.clone();
        sorted.sort();
        prop_assert_eq!(sorted, vec![0, 1, 2, 3]);
    }
}
