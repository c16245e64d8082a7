use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prognosis_core::metrics::{
    bootstrap_ci, bootstrap_ci_with_sampler, concordance_at, pr_auc, reliability, roc_auc, roc_auc_ci,
};

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut good, mut total) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                total += 1.0;
                if si > sj {
                    good += 1.0;
                } else if si == sj {
                    good += 0.5;
                }
            }
        }
    }
    good / total
}

fn random_cohort(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        if labels.iter().any(|&y| y) && labels.iter().any(|&y| !y) {
            return (scores, labels);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scores from a binormal model with separation `shift`.
fn binormal(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> (Vec<f64>, Vec<bool>) {
    let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
    let scores = labels
        .iter()
        .map(|&y| {
            let u: f64 = (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0;
            u + if y { shift } else { 0.0 }
        })
        .collect();
    (scores, labels)
}

#[test]
fn auc_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(2..25);
        let (s, l) = random_cohort(&mut rng, n, 6);
        assert_eq!(roc_auc(&s, &l).unwrap(), pair_auc(&s, &l));
    }
}

proptest! {
    #[test]
    fn auc_is_rank_invariant(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)) {
        let (s, l): (Vec<f64>, Vec<bool>) = raw.into_iter().unzip();
        prop_assume!(l.iter().any(|&y| y) && l.iter().any(|&y| !y));
        let a = roc_auc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|&x| (0.7 * x).exp() + 3.0).collect();
        prop_assert!((roc_auc(&t, &l).unwrap() - a).abs() < 1e-12);
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[0] != w[1]) {
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((a + roc_auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concordance_is_rank_invariant(raw in prop::collection::vec((0.0f64..1.0, 1.0f64..200.0), 3..30)) {
        let risk: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let times: Vec<Option<f64>> = raw.iter().map(|r| Some(r.1)).collect();
        let c = concordance_at(&risk, &times).unwrap();
        let warped: Vec<f64> = risk.iter().map(|r| r.powi(3) * 5.0 - 1.0).collect();
        prop_assert!((concordance_at(&warped, &times).unwrap() - c).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&c));
    }
}

#[test]
fn average_precision_of_random_scores_is_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels: Vec<bool> = (0..400).map(|i| i % 10 < 3).collect();
    let mut scores: Vec<f64> = (0..400).map(|i| i as f64).collect();
    let mut total = 0.0;
    for _ in 0..1000 {
        scores.shuffle(&mut rng);
        total += pr_auc(&scores, &labels).unwrap();
    }
    assert!((total / 1000.0 - 0.3).abs() < 0.05, "{}", total / 1000.0);
}

#[test]
fn bootstrap_basics() {
    let ci = bootstrap_ci(50, |_| Ok(0.7), 200, 3, None).unwrap();
    assert_eq!((ci.point, ci.lo, ci.hi), (0.7, 0.7, 0.7));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (s, l) = binormal(&mut rng, 300, 1.0);
    let ci = roc_auc_ci(&s, &l, 1000, 5).unwrap();
    assert!(ci.lo <= ci.point && ci.point <= ci.hi);
    assert_eq!(ci.iterations_used, 1000);
    let identity = bootstrap_ci_with_sampler(
        s.len(),
        |idx| {
            roc_auc(
                &idx.iter().map(|&i| s[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| l[i]).collect::<Vec<_>>(),
            )
        },
        1,
        0,
        |_| (0..300).collect(),
    )
    .unwrap();
    assert_eq!((identity.lo, identity.hi), (identity.point, identity.point));
    assert_eq!(roc_auc_ci(&s, &l, 1000, 5).unwrap(), ci);
}

#[test]
fn patient_level_resampling_keeps_groups() {
    let groups: Vec<usize> = (0..40).map(|i| i / 4).collect();
    // Every resample contains whole groups, so its size is a multiple of 4.
    let ci = bootstrap_ci(
        40,
        |idx| {
            assert_eq!(idx.len() % 4, 0);
            Ok(idx.iter().map(|&i| groups[i] as f64).sum::<f64>() / idx.len() as f64)
        },
        100,
        6,
        Some(&groups),
    )
    .unwrap();
    assert!(ci.lo < ci.point && ci.point < ci.hi);
}

#[test]
fn degenerate_resamples_are_redrawn_or_skipped() {
    // One positive in 30: many resamples miss it.
    let mut labels = vec![false; 30];
    labels[0] = true;
    let scores: Vec<f64> = (0..30).map(|i| i as f64).collect();
    let ci = roc_auc_ci(&scores, &labels, 200, 7).unwrap();
    assert!(ci.iterations_used > 150);
    assert!(bootstrap_ci(
        5,
        |idx| if idx.len() == 5 && idx == [0, 1, 2, 3, 4] {
            Ok(1.0)
        } else {
            Err(prognosis_core::Error::DegenerateLabels("x".into()))
        },
        10,
        0,
        None
    )
    .is_err());
}

#[test]
fn interval_narrows_with_cohort_size() {
    for seed in 0..5 {
        let widths: Vec<f64> = [100, 1000, 10_000]
            .iter()
            .map(|&n| {
                let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
                let (s, l) = binormal(&mut rng, n, 1.0);
                let ci = roc_auc_ci(&s, &l, 200, seed).unwrap();
                ci.hi - ci.lo
            })
            .collect();
        assert!(widths[0] > widths[1] && widths[1] > widths[2], "{widths:?}");
    }
}

#[test]
fn oracle_predictor_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let preds: Vec<f64> = (0..10_000).map(|_| sigmoid(rng.random_range(-4.0..2.0))).collect();
    let outcomes: Vec<Option<bool>> = preds.iter().map(|&p| Some(rng.random::<f64>() < p)).collect();
    let curve = reliability(96.0, &preds, &outcomes).unwrap();
    assert_eq!(curve.bins.iter().map(|b| b.count).sum::<usize>(), 10_000);
    assert!(curve.max_gap() < 0.05, "{}", curve.max_gap());
}

#[test]
fn perfect_ranking_gives_nondecreasing_fractions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let preds: Vec<f64> = (0..537).map(|_| rng.random::<f64>()).collect();
    let outcomes: Vec<Option<bool>> = preds.iter().map(|&p| Some(p > 0.63)).collect();
    let curve = reliability(48.0, &preds, &outcomes).unwrap();
    let fracs: Vec<f64> = curve.bins.iter().map(|b| b.emp_frac.unwrap()).collect();
    assert!(fracs.windows(2).all(|w| w[0] <= w[1]));
    assert!(fracs.iter().all(|f| (0.0..=1.0).contains(f)));
}
