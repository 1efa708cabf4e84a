use imitate_core::eval::{auc, f1_acc, linear_probe, precision_at_k, zero_shot_metrics, Logistic};
use imitate_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
    ) {
        // coarse scores force ties
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        match auc(&scores, &labels) {
            Some(a) => prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12),
            None => prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l)),
        }
    }
}

#[test]
fn auc_examples() {
    let labels = [true, false, true, false, false];
    let perfect: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    assert_eq!(auc(&perfect, &labels), Some(1.0));
    let flipped: Vec<f64> = perfect.iter().map(|s| -s).collect();
    assert_eq!(auc(&flipped, &labels), Some(0.0));
    assert_eq!(auc(&[0.3; 5], &labels), Some(0.5));
    assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
}

#[test]
fn random_scores_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let runs = 200;
    let aucs: Vec<f64> = (0..runs)
        .map(|_| {
            let labels: Vec<bool> = (0..500).map(|_| rng.gen_bool(0.3)).collect();
            let scores: Vec<f64> = (0..500).map(|_| rng.gen()).collect();
            auc(&scores, &labels).unwrap()
        })
        .collect();
    let mean = aucs.iter().sum::<f64>() / runs as f64;
    let sd = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / runs as f64).sqrt();
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    assert!(sd < 0.04, "spread {sd}");
}

#[test]
fn f1_and_accuracy_at_threshold() {
    let scores = [0.5, -0.1, 0.2, 0.0, -0.3];
    let labels = [true, true, false, false, false];
    // predictions: T F T F F -> tp 1, fp 1, fn 1
    let (f1, acc) = f1_acc(&scores, &labels, 0.0);
    assert!((f1 - 0.5).abs() < 1e-12);
    assert!((acc - 0.6).abs() < 1e-12);
    assert_eq!(f1_acc(&[-1.0, -1.0], &[true, false], 0.0).0, 0.0);
}

#[test]
fn undefined_conditions_leave_macro_average() {
    let labels = vec![vec![true, true], vec![false, true], vec![true, true]];
    let scores = vec![vec![1.0, 0.3], vec![-1.0, 0.1], vec![2.0, -0.2]];
    let rep = zero_shot_metrics(&["a", "b"], &scores, &labels);
    assert_eq!(rep.conditions[0].auc, Some(1.0));
    assert_eq!(rep.conditions[1].auc, None);
    assert_eq!(rep.macro_auc, Some(1.0));
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn retrieval_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let protos: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 8)).collect();
    let cats: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let cands: Vec<Vec<f64>> = cats.iter().map(|&c| protos[c].clone()).collect();
    let rep = precision_at_k(&cands, &cats, &cands, &cats, &[5, 10]).unwrap();
    assert_eq!(rep.precision, vec![1.0, 1.0]);
    assert!((rep.chance - 1.0 / 3.0).abs() < 1e-12);

    // K = 1 with one same-category candidate closest to the query
    let q = vec![vec![1.0, 0.0]];
    let c = vec![vec![0.0, 1.0], vec![0.9, 0.1], vec![-1.0, 0.0]];
    let rep = precision_at_k(&q, &[1], &c, &[0, 1, 2], &[1]).unwrap();
    assert_eq!(rep.precision, vec![1.0]);

    let err = precision_at_k(&q, &[1], &c, &[0, 1, 2], &[5]).unwrap_err();
    assert!(matches!(err, Error::RetrievalK { k: 5, candidates: 3 }));
}

#[test]
fn random_embeddings_retrieve_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = 4;
    let cats: Vec<usize> = (0..400).map(|i| i % c).collect();
    let cands: Vec<Vec<f64>> = cats.iter().map(|_| unit(&mut rng, 16)).collect();
    let queries: Vec<Vec<f64>> = (0..400).map(|_| unit(&mut rng, 16)).collect();
    let rep = precision_at_k(&queries, &cats, &cands, &cats, &[5, 10, 100]).unwrap();
    for p in rep.precision {
        assert!((p - 1.0 / c as f64).abs() < 0.03, "{p}");
    }
}

fn gaussian_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

#[test]
fn logistic_converges_on_overlapping_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_rows(&mut rng, 300, 3);
    let y: Vec<bool> = x.iter().map(|r| r[0] + 0.8 * rng.sample::<f64, _>(StandardNormal) > 0.0).collect();
    let m = Logistic::fit(&x, &y, 1e-6, 5000);
    assert!(m.iterations < 5000, "did not converge");
    assert!(m.weights[0] > 0.5 && m.weights[1].abs() < 0.5);
}

#[test]
fn linear_probe_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // separable with a margin of 1 on both tasks
    let mut x = gaussian_rows(&mut rng, 200, 4);
    let y: Vec<Vec<bool>> = x.iter().map(|r| vec![r[0] > 0.0, r[1] + r[2] > 0.0]).collect();
    for (r, l) in x.iter_mut().zip(&y) {
        r[0] += if l[0] { 1.0 } else { -1.0 };
        r[1] += if l[1] { 1.0 } else { -1.0 };
    }
    let rep = linear_probe(&x[..150], &y[..150], &x[150..], &y[150..], 1.0);
    assert_eq!(rep.per_condition, vec![Some(1.0), Some(1.0)]);

    // labels independent of features
    let mut total = 0.0;
    for _ in 0..20 {
        let x = gaussian_rows(&mut rng, 400, 4);
        let y: Vec<Vec<bool>> = (0..400).map(|_| vec![rng.gen_bool(0.3)]).collect();
        total += linear_probe(&x[..200], &y[..200], &x[200..], &y[200..], 1.0).macro_auc.unwrap();
    }
    assert!((total / 20.0 - 0.5).abs() < 0.03, "{}", total / 20.0);

    // single-class training labels are excluded
    let y1: Vec<Vec<bool>> = (0..150).map(|i| vec![true, i % 2 == 0]).collect();
    let rep = linear_probe(&x[..150], &y1, &x[150..], &y[150..], 0.5);
    assert_eq!(rep.per_condition[0], None);
    assert!(rep.per_condition[1].is_some());
}

#[test]
fn more_probe_data_never_hurts() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 16;
        let w = gaussian_rows(&mut rng, 3, d);
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let x = gaussian_rows(rng, n, d);
            let y: Vec<Vec<bool>> = x
                .iter()
                .map(|r| {
                    w.iter()
                        .map(|wk| r.iter().zip(wk).map(|(a, b)| a * b).sum::<f64>() + 2.0 * rng.sample::<f64, _>(StandardNormal) > 1.0)
                        .collect()
                })
                .collect();
            (x, y)
        };
        let (tx, ty) = make(&mut rng, 2000);
        let (vx, vy) = make(&mut rng, 500);
        let small = linear_probe(&tx[..20], &ty[..20], &vx, &vy, 0.01).macro_auc.unwrap();
        let full = linear_probe(&tx, &ty, &vx, &vy, 1.0).macro_auc.unwrap();
        assert!(full >= small, "seed {seed}: {full} < {small}");
    }
}
