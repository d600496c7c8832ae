//! Hypothesis tests and rank metrics against frozen reference values.
//!
//! Reference numbers were produced once with scipy 1.15 (`ttest_1samp`,
//! `ttest_ind(equal_var=False)`, `wilcoxon(correction=True, method="approx")`,
//! `wilcoxon(method="exact")`, `mannwhitneyu(method="asymptotic")`,
//! `spearmanr`) and pasted here.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wm_core::stats::{auc, mann_whitney, paired_t, rank_average, spearman, welch_t, wilcoxon};

const A: [f64; 30] = [
    0.4, 0.0, -0.7, -0.4, 0.3, -0.1, -1.4, 1.0, 1.3, -1.8, -0.8, 0.2, 0.7, -0.3, 0.3, 1.1, 0.0, 1.0, 1.7, -0.1, 1.1,
    0.6, 0.6, 0.5, -0.1, 0.9, 0.8, 0.4, -0.2, 1.5,
];
const B: [f64; 30] = [
    -0.9, -1.7, -0.1, 1.2, 3.4, -0.5, 1.3, 0.2, -2.5, -0.6, 0.2, 0.7, -0.9, 0.8, 2.5, 0.3, -0.9, 2.8, -0.3, 0.9, -1.0,
    -2.7, 0.2, 0.8, 1.9, 0.1, 1.9, 0.6, -1.5, 1.8,
];
const D: [f64; 30] = [
    1.3, 1.7, -0.6, -1.6, -3.1, 0.4, -2.7, 0.8, 3.8, -1.2, -1.0, -0.5, 1.6, -1.1, -2.2, 0.8, 0.9, -1.8, 2.0, -1.0, 2.1,
    3.3, 0.4, -0.3, -2.0, 0.8, -1.1, -0.2, 1.3, -0.3,
];
const A2: [f64; 30] = [
    1.3, 0.9, 0.2, 0.5, 1.2, 0.8, -0.5, 1.9, 2.2, -0.9, 0.1, 1.1, 1.6, 0.6, 1.2, 2.0, 0.9, 1.9, 2.6, 0.8, 2.0, 1.5,
    1.5, 1.4, 0.8, 1.8, 1.7, 1.3, 0.7, 2.4,
];
const D2: [f64; 30] = [
    2.4, 2.8, 0.5, -0.5, -2.0, 1.5, -1.6, 1.9, 4.9, -0.1, 0.1, 0.6, 2.7, 0.0, -1.1, 1.9, 2.0, -0.7, 3.1, 0.1, 3.2, 4.4,
    1.5, 0.8, -0.9, 1.9, 0.0, 0.9, 2.4, 0.8,
];
const E: [f64; 12] = [
    -1.398, -0.379, 1.948, -0.433, 1.149, -0.074, 1.399, 1.824, 0.634, -1.142, -0.595, 1.456,
];

const STAT_TOL: f64 = 1e-6;
const P_TOL: f64 = 1e-4;

fn close(what: &str, got: f64, want: f64, tol: f64) {
    assert!((got - want).abs() <= tol, "{what}: got {got}, reference {want}");
}

#[test]
fn paired_t_matches_reference() {
    let r = paired_t(&D).unwrap();
    close("t", r.statistic, 0.0536881481776569, STAT_TOL);
    close("p", r.p_value, 0.95755177569464, P_TOL);
    let r = paired_t(&D2).unwrap();
    close("t", r.statistic, 3.597105927903015, STAT_TOL);
    close("p", r.p_value, 0.0011798597190302129, P_TOL);
    assert_eq!(r.df, Some(29.0));
}

#[test]
fn welch_t_matches_reference() {
    let r = welch_t(&A, &B).unwrap();
    close("t", r.statistic, 0.05427832438047124, STAT_TOL);
    close("p", r.p_value, 0.9569538191133018, P_TOL);
    close("df", r.df.unwrap(), 44.97433237019875, STAT_TOL);
    let r = welch_t(&A2, &B).unwrap();
    close("t", r.statistic, 2.9853078409259193, STAT_TOL);
    close("p", r.p_value, 0.0045699746968071685, P_TOL);
}

#[test]
fn wilcoxon_matches_reference() {
    let r = wilcoxon(&D).unwrap();
    assert_eq!(r.method, "wilcoxon_normal");
    close("W", r.statistic, 230.0, STAT_TOL);
    close("p", r.p_value, 0.9671773914529607, P_TOL);
    let r = wilcoxon(&D2).unwrap();
    assert_eq!(r.n1, 28, "zero differences are dropped");
    close("W", r.statistic, 70.5, STAT_TOL);
    close("p", r.p_value, 0.002636726280450294, P_TOL);
}

#[test]
fn exact_wilcoxon_matches_reference() {
    let r = wilcoxon(&E).unwrap();
    assert_eq!(r.method, "wilcoxon_exact");
    close("W", r.statistic, 24.0, STAT_TOL);
    close("p", r.p_value, 0.26611328125, 1e-12);
}

#[test]
fn mann_whitney_matches_reference() {
    let r = mann_whitney(&A, &B).unwrap();
    close("U", r.statistic, 465.0, STAT_TOL);
    close("p", r.p_value, 0.8301506830747207, P_TOL);
    let r = mann_whitney(&A2, &B).unwrap();
    close("U", r.statistic, 645.5, STAT_TOL);
    close("p", r.p_value, 0.0039050633553568454, P_TOL);
}

#[test]
fn spearman_matches_reference() {
    close("rho", spearman(&A, &B).unwrap(), -0.07469342251950947, 1e-12);
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks by counting, independent of the sort-based ranker.
fn ranks_by_counting(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

#[test]
fn spearman_two_paths_agree_with_ties() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..20).map(|_| f64::from(r.random_range(0..6u8))).collect();
    let y: Vec<f64> = x.iter().map(|v| v + f64::from(r.random_range(0..4u8))).collect();
    let reference = pearson(&ranks_by_counting(&x), &ranks_by_counting(&y));
    assert!((spearman(&x, &y).unwrap() - reference).abs() < 1e-12);
    assert_eq!(rank_average(&x), ranks_by_counting(&x));
}

#[test]
fn auc_matches_pairwise_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let scores: Vec<f64> = (0..50).map(|_| (r.random::<f64>() * 10.0).round() / 10.0).collect();
    let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0 || r.random::<f64>() < 0.3).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    assert!((auc(&scores, &labels).unwrap() - num / den).abs() < 1e-12);
}

#[test]
fn null_rejection_rates_are_calibrated() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let reps = 1000;
    let mut rejections = [0usize; 4];
    for _ in 0..reps {
        let a: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut r)).collect();
        let b: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut r)).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let ps = [
            paired_t(&d).unwrap().p_value,
            wilcoxon(&d).unwrap().p_value,
            welch_t(&a, &b).unwrap().p_value,
            mann_whitney(&a, &b).unwrap().p_value,
        ];
        for (k, p) in ps.iter().enumerate() {
            if *p < 0.05 {
                rejections[k] += 1;
            }
        }
    }
    for (name, k) in ["paired_t", "wilcoxon", "welch_t", "mann_whitney"]
        .iter()
        .zip(rejections)
    {
        let rate = k as f64 / reps as f64;
        assert!((0.03..=0.07).contains(&rate), "{name}: rejection rate {rate}");
    }
}

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 8..40)
}

proptest! {
    #[test]
    fn p_values_in_unit_interval_and_swap_negates_t(a in sample(), b in sample()) {
        let w1 = welch_t(&a, &b).unwrap();
        let w2 = welch_t(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&w1.p_value));
        prop_assert!((w1.statistic + w2.statistic).abs() < 1e-12);
        prop_assert!((w1.p_value - w2.p_value).abs() < 1e-12);
        let m1 = mann_whitney(&a, &b).unwrap();
        let m2 = mann_whitney(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&m1.p_value));
        prop_assert!((m1.p_value - m2.p_value).abs() < 1e-12);
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let t1 = paired_t(&d).unwrap();
        let t2 = paired_t(&neg).unwrap();
        prop_assert!((t1.statistic + t2.statistic).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&t1.p_value));
        prop_assert!((0.0..=1.0).contains(&wilcoxon(&d).unwrap().p_value));
    }

    #[test]
    fn rank_metrics_ignore_monotone_transforms(x in sample(), seed in 0u64..1000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|v| v + r.random::<f64>() * 20.0).collect();
        let labels: Vec<bool> = (0..x.len()).map(|i| i % 2 == 0).collect();
        let fx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp()).collect();
        let fy: Vec<f64> = y.iter().map(|v| v * v * v).collect();
        prop_assert!((spearman(&x, &y).unwrap() - spearman(&fx, &fy).unwrap()).abs() < 1e-12);
        prop_assert!((auc(&x, &labels).unwrap() - auc(&fx, &labels).unwrap()).abs() < 1e-12);
    }
}
