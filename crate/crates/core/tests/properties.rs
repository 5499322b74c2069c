//! Randomized invariants across numerics, tracker, losses and oracle.

use isda::loss::surrogate_loss_at;
use isda::numeric::{psd_factor, Mat};
use isda::oracle::{explicit_loss, mc_expected_ce};
use isda::semi::{consistency_surrogate, UnlabeledBatch};
use isda::{ClassifierHead, CovMode, CovarianceTracker, LabeledBatch, Rng};
use proptest::prelude::*;

fn normals(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn random_mat(r: usize, c: usize, scale: f64, rng: &mut Rng) -> Mat {
    Mat::from_vec(r, c, normals(r * c, scale, rng)).unwrap()
}

fn random_head(c: usize, a: usize, rng: &mut Rng) -> ClassifierHead {
    ClassifierHead::new(random_mat(c, a, 1.0, rng), normals(c, 0.5, rng)).unwrap()
}

fn random_tracker(c: usize, a: usize, mode: CovMode, rng: &mut Rng) -> CovarianceTracker {
    let mut t = CovarianceTracker::new(c, a, mode).unwrap();
    for j in 0..c {
        let n = 2 + rng.below(2 * a);
        t.update(&random_mat(n, a, 0.8, rng), &vec![j; n]).unwrap();
    }
    t
}

fn mode_strategy() -> impl Strategy<Value = CovMode> {
    prop_oneof![Just(CovMode::Full), Just(CovMode::Diagonal), Just(CovMode::Shared), Just(CovMode::Identity)]
}

fn rel(got: &Mat, want: &Mat) -> f64 {
    got.frobenius_dist(want) / want.frobenius().max(1e-300)
}

/// Rows of `x` fed in the given order as mini-batches of the given sizes.
fn stream(x: &Mat, labels: &[usize], c: usize, mode: CovMode, order: &[usize], sizes: &[usize]) -> CovarianceTracker {
    let mut t = CovarianceTracker::new(c, x.cols(), mode).unwrap();
    let mut pos = 0;
    for &s in sizes.iter().cycle() {
        if pos >= order.len() {
            break;
        }
        let idx = &order[pos..(pos + s).min(order.len())];
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        t.update(&x.select_rows(idx), &ys).unwrap();
        pos += s;
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn refactoring_does_not_grow_the_residual(seed in 0u64..10_000, a in 1usize..7, rank in 1usize..7) {
        let mut rng = Rng::seed_from(seed);
        let g = random_mat(a, rank.min(a), 1.0, &mut rng);
        let s = g.matmul_t(&g).unwrap();
        let l1 = psd_factor(&s, 0.0).unwrap();
        let s1 = l1.matmul_t(&l1).unwrap();
        let r1 = s1.frobenius_dist(&s);
        let l2 = psd_factor(&s1, 0.0).unwrap();
        let r2 = l2.matmul_t(&l2).unwrap().frobenius_dist(&s1);
        prop_assert!(r2 <= r1 + 1e-12, "{r2} > {r1}");
    }

    #[test]
    fn batch_partition_and_order_do_not_matter(
        seed in 0u64..10_000,
        mode in mode_strategy(),
        sizes in prop::collection::vec(1usize..17, 1..6),
    ) {
        let mut rng = Rng::seed_from(seed);
        let (c, a, n) = (3, 4, 60);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let mut x = random_mat(n, a, 1.0, &mut rng);
        x.as_mut_slice().iter_mut().for_each(|v| *v += 3.0);
        let order: Vec<usize> = (0..n).collect();
        let one_shot = stream(&x, &labels, c, mode, &order, &[n]);
        let shuffled = stream(&x, &labels, c, mode, &rng.permutation(n), &sizes);
        for j in 0..c {
            prop_assert_eq!(one_shot.count(j), shuffled.count(j));
            let cov = one_shot.covariance(j).unwrap();
            if cov.frobenius() > 0.0 {
                prop_assert!(rel(&shuffled.covariance(j).unwrap(), &cov) < 1e-10);
            }
            for (p, q) in one_shot.mean(j).iter().zip(shuffled.mean(j)) {
                prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scaling_features_scales_statistics(seed in 0u64..10_000, s in -4.0f64..4.0) {
        prop_assume!(s.abs() > 1e-3);
        let mut rng = Rng::seed_from(seed);
        let (c, a, n) = (3, 5, 40);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let x = random_mat(n, a, 1.0, &mut rng);
        let mut xs = x.clone();
        xs.scale(s);
        for mode in [CovMode::Full, CovMode::Diagonal, CovMode::Shared] {
            let mut t = CovarianceTracker::new(c, a, mode).unwrap();
            let mut ts = t.clone();
            t.update(&x, &labels).unwrap();
            ts.update(&xs, &labels).unwrap();
            for j in 0..c {
                for (m, ms) in t.mean(j).iter().zip(ts.mean(j)) {
                    prop_assert!((m * s - ms).abs() <= 1e-12 * (1.0 + ms.abs()));
                }
                let mut want = t.covariance(j).unwrap();
                want.scale(s * s);
                if want.frobenius() > 0.0 {
                    prop_assert!(rel(&ts.covariance(j).unwrap(), &want) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shifting_features_leaves_covariances(seed in 0u64..10_000, shift in prop::collection::vec(-50.0f64..50.0, 4)) {
        let mut rng = Rng::seed_from(seed);
        let (c, n) = (3, 45);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let x = random_mat(n, 4, 1.0, &mut rng);
        let mut xs = x.clone();
        for r in 0..n {
            xs.row_mut(r).iter_mut().zip(&shift).for_each(|(v, d)| *v += d);
        }
        for mode in [CovMode::Full, CovMode::Diagonal, CovMode::Shared] {
            let batches = [9usize, 4, 17];
            let order: Vec<usize> = (0..n).collect();
            let t = stream(&x, &labels, c, mode, &order, &batches);
            let ts = stream(&xs, &labels, c, mode, &order, &batches);
            for j in 0..c {
                prop_assert!(rel(&ts.covariance(j).unwrap(), &t.covariance(j).unwrap()) < 1e-10);
            }
        }
    }

    /// Closed-form moment generating function of the augmented logit
    /// differences, evaluated independently, equals the surrogate exactly.
    #[test]
    fn moment_generating_form_equals_surrogate(seed in 0u64..10_000, mode in mode_strategy(), lambda in 0.0f64..2.0) {
        let mut rng = Rng::seed_from(seed);
        let (c, a, n) = (2 + rng.below(6), 1 + rng.below(7), 1 + rng.below(5));
        let head = random_head(c, a, &mut rng);
        let tracker = random_tracker(c, a, mode, &mut rng);
        let x = random_mat(n, a, 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let sigma = tracker.covariance(y).unwrap();
            let terms: Vec<f64> = (0..c).map(|j| {
                let v: Vec<f64> = (0..a).map(|d| head.weight[(j, d)] - head.weight[(y, d)]).collect();
                let sv = sigma.matvec(&v).unwrap();
                let quad: f64 = v.iter().zip(&sv).map(|(p, q)| p * q).sum();
                let mean: f64 = v.iter().zip(x.row(i)).map(|(p, q)| p * q).sum::<f64>() + head.bias[j] - head.bias[y];
                mean + 0.5 * lambda * quad
            }).collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            total += m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        }
        let direct = total / n as f64;
        let got = surrogate_loss_at(&LabeledBatch::new(x, labels).unwrap(), &head, &tracker, lambda).unwrap().loss;
        prop_assert!((got - direct).abs() < 1e-12 * direct.abs().max(1.0), "{got} vs {direct}");
    }

    #[test]
    fn surrogate_is_non_decreasing_in_lambda(seed in 0u64..10_000, mode in mode_strategy()) {
        let mut rng = Rng::seed_from(seed);
        let (c, a, n) = (2 + rng.below(6), 1 + rng.below(7), 1 + rng.below(5));
        let head = random_head(c, a, &mut rng);
        let tracker = random_tracker(c, a, mode, &mut rng);
        let batch = LabeledBatch::new(random_mat(n, a, 1.0, &mut rng), (0..n).map(|_| rng.below(c)).collect()).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=20 {
            let l = surrogate_loss_at(&batch, &head, &tracker, 0.1 * k as f64).unwrap().loss;
            prop_assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn probabilities_are_inputs_not_parameters(seed in 0u64..10_000) {
        let mut rng = Rng::seed_from(seed);
        let (c, a, n) = (4, 3, 3);
        let head = random_head(c, a, &mut rng);
        let tracker = random_tracker(c, a, CovMode::Full, &mut rng);
        let x = random_mat(n, a, 1.0, &mut rng);
        let probs = |rng: &mut Rng| {
            let mut p = Mat::zeros(n, c);
            for i in 0..n {
                // first class keeps the largest mass so the pseudo labels agree
                let mut row: Vec<f64> = (0..c).map(|_| 0.05 + rng.uniform()).collect();
                row[0] = 2.0;
                let s: f64 = row.iter().sum();
                p.row_mut(i).iter_mut().zip(&row).for_each(|(d, v)| *d = v / s);
            }
            p
        };
        let (p1, p2) = (probs(&mut rng), probs(&mut rng));
        let r1 = consistency_surrogate(&UnlabeledBatch::new(x.clone(), p1).unwrap(), &head, &tracker, 0.7).unwrap();
        let r2 = consistency_surrogate(&UnlabeledBatch::new(x, p2).unwrap(), &head, &tracker, 0.7).unwrap();
        prop_assert!(r1.loss != r2.loss);
        // the report carries gradients for W, b and features only
        prop_assert_eq!(r1.grad_weight.shape(), (c, a));
        prop_assert_eq!(r1.grad_bias.len(), c);
        prop_assert_eq!(r1.grad_features.shape(), (n, a));
    }
}

#[test]
fn bound_gap_is_non_negative_and_grows_with_lambda() {
    let draws = 20_000;
    for seed in 0..20u64 {
        let mut rng = Rng::seed_from(seed);
        let (c, a) = (2 + rng.below(5), 1 + rng.below(5));
        let head = random_head(c, a, &mut rng);
        let tracker = random_tracker(c, a, CovMode::Full, &mut rng);
        let batch = LabeledBatch::new(random_mat(2, a, 1.0, &mut rng), vec![0, c - 1]).unwrap();
        let mc_rng = rng.split(1);
        let mut prev: Option<(f64, f64)> = None;
        for lambda in [0.0, 0.25, 0.5, 1.0] {
            let bound = surrogate_loss_at(&batch, &head, &tracker, lambda).unwrap().loss;
            // common random numbers across strengths
            let mc = mc_expected_ce(&batch, &head, &tracker, lambda, draws, &mc_rng).unwrap();
            let gap = bound - mc.estimate;
            assert!(gap >= -3.0 * mc.std_error, "seed {seed} lambda {lambda}: gap {gap}");
            if let Some((g0, s0)) = prev {
                assert!(gap >= g0 - 3.0 * (s0 + mc.std_error), "seed {seed} lambda {lambda}: {gap} < {g0}");
            }
            prev = Some((gap, mc.std_error));
        }
    }
}

#[test]
fn each_sample_draws_from_its_own_stream() {
    let mut rng = Rng::seed_from(3);
    let (c, a) = (3, 4);
    let head = random_head(c, a, &mut rng);
    let tracker = random_tracker(c, a, CovMode::Full, &mut rng);
    let rows = random_mat(3, a, 1.0, &mut rng);
    let root = Rng::seed_from(77);
    let loss = |idx: &[usize], labels: Vec<usize>| {
        explicit_loss(&LabeledBatch::new(rows.select_rows(idx), labels).unwrap(), &head, &tracker, 0.8, 50, &root)
            .unwrap()
    };
    // the second row's contribution does not depend on what sits at index 0
    let second_a = 2.0 * loss(&[0, 2], vec![0, 2]) - loss(&[0], vec![0]);
    let second_b = 2.0 * loss(&[1, 2], vec![1, 2]) - loss(&[1], vec![1]);
    assert!((second_a - second_b).abs() < 1e-12);
    // and duplicated rows at different indices receive different draws
    let dup = loss(&[2, 2], vec![2, 2]);
    assert_ne!(dup, loss(&[2], vec![2]));
}
