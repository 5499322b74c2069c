//! Acceptance suite: one pass/fail line per criterion, run sequentially so
//! the wall-clock measurements do not compete with each other.

use std::time::{Duration, Instant};

use isda::complexity::{measure_overhead, report_timing, FlopTally};
use isda::data::{generate_synthetic, split_semi, CovSpec, Dataset, SyntheticConfig};
use isda::loss::{cross_entropy, surrogate_loss_at};
use isda::optim::{LrSchedule, SgdConfig};
use isda::oracle::{explicit_loss, mc_expected_ce, mc_expected_kl};
use isda::semi::{consistency_surrogate, soft_cross_entropy, UnlabeledBatch};
use isda::train::{EpochMetrics, ModelSpec, Objective, TrainConfig, Trainer};
use isda::{ClassifierHead, CovMode, CovarianceTracker, LabeledBatch, Mat, Rng};

const MODES: [CovMode; 4] = [CovMode::Full, CovMode::Diagonal, CovMode::Shared, CovMode::Identity];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (&'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("bound dominance", 120, bound_dominance),
        ("soft-target bound dominance", 120, soft_bound_dominance),
        ("zero-strength reduction", 5, zero_strength_reduction),
        ("tightness during training", 300, tightness_during_training),
        ("explicit to implicit convergence", 120, explicit_convergence),
        ("gradient correctness", 60, gradient_correctness),
        ("streaming statistics exactness", 30, streaming_exactness),
        ("generalization direction", 600, generalization_direction),
        ("complexity accounting", 120, complexity_accounting),
        ("full vs identity ablation", 300, ablation_ordering),
    ];
    // ACCEPTANCE_ONLY=4,6 runs a subset
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, limit_s, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(*limit_s);
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {:>2} {name}: {} [{:.1}s of {limit_s}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            took.as_secs_f64()
        );
    }
    let ran = only.map_or(criteria.len(), |o| o.iter().filter(|&&k| (1..=criteria.len()).contains(&k)).count());
    println!("acceptance: {}/{ran} criteria pass", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---- random instances ---------------------------------------------------

fn normals(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn random_head(c: usize, a: usize, rng: &mut Rng) -> ClassifierHead {
    let w = Mat::from_vec(c, a, normals(c * a, 1.0, rng)).unwrap();
    ClassifierHead::new(w, normals(c, 0.5, rng)).unwrap()
}

/// Tracker fed class-wise samples with random means and per-axis scales, so
/// every class covariance is a random PSD matrix, rank-deficient when the
/// class has fewer samples than dimensions.
fn random_tracker(c: usize, a: usize, mode: CovMode, rng: &mut Rng) -> CovarianceTracker {
    let mut t = CovarianceTracker::new(c, a, mode).unwrap();
    for j in 0..c {
        let n = 2 + rng.below(2 * a);
        let mean = normals(a, 1.0, rng);
        let scales: Vec<f64> = (0..a).map(|_| rng.uniform_in(0.1, 1.5)).collect();
        let mut x = Mat::zeros(n, a);
        for r in 0..n {
            let mix = normals(a, 1.0, rng);
            for d in 0..a {
                // a shared component correlates the axes
                x[(r, d)] = mean[d] + scales[d] * (rng.normal() + 0.7 * mix[(d + 1) % a]);
            }
        }
        t.update(&x, &vec![j; n]).unwrap();
    }
    t
}

fn random_probs(n: usize, c: usize, rng: &mut Rng) -> Mat {
    let mut p = Mat::zeros(n, c);
    for i in 0..n {
        let e: Vec<f64> = (0..c).map(|_| (2.0 * rng.normal()).exp()).collect();
        let s: f64 = e.iter().sum();
        p.row_mut(i).iter_mut().zip(&e).for_each(|(pi, ei)| *pi = ei / s);
    }
    p
}

/// Direct `log sum exp(z) - z_y`, kept independent of the library.
fn oracle_ce(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
}

fn oracle_logits(head: &ClassifierHead, a: &[f64]) -> Vec<f64> {
    (0..head.num_classes())
        .map(|j| head.weight.row(j).iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + head.bias[j])
        .collect()
}

// ---- 1, 2: bound dominance ----------------------------------------------

const BOUND_INSTANCES: usize = 100;
const BOUND_DRAWS: usize = 1_000_000;
const BOUND_SIGMAS: f64 = 3.0;

fn bound_instance(seed: u64) -> (ClassifierHead, CovarianceTracker, Mat, f64, Rng) {
    let mut rng = Rng::seed_from(seed);
    let c = 2 + rng.below(7);
    let a = 1 + rng.below(8);
    let head = random_head(c, a, &mut rng);
    let tracker = random_tracker(c, a, CovMode::Full, &mut rng);
    let features = Mat::from_vec(1, a, normals(a, 1.0, &mut rng)).unwrap();
    let lambda = rng.uniform_in(0.0, 2.0);
    (head, tracker, features, lambda, rng.split(99))
}

fn bound_dominance() -> Outcome {
    let (mut ok, mut worst) = (0, f64::INFINITY);
    for k in 0..BOUND_INSTANCES {
        let (head, tracker, features, lambda, mc_rng) = bound_instance(1_000 + k as u64);
        let y = k % head.num_classes();
        let batch = LabeledBatch::new(features, vec![y]).unwrap();
        let bound = surrogate_loss_at(&batch, &head, &tracker, lambda).unwrap().loss;
        let mc = mc_expected_ce(&batch, &head, &tracker, lambda, BOUND_DRAWS, &mc_rng).unwrap();
        let margin = (bound - mc.estimate) / mc.std_error.max(f64::MIN_POSITIVE);
        ok += usize::from(bound >= mc.estimate - BOUND_SIGMAS * mc.std_error);
        worst = worst.min(margin);
    }
    outcome(ok == BOUND_INSTANCES, format!("{ok}/{BOUND_INSTANCES} instances, smallest margin {worst:.2} stderr"))
}

fn soft_bound_dominance() -> Outcome {
    let (mut ok, mut worst) = (0, f64::INFINITY);
    for k in 0..BOUND_INSTANCES {
        let (head, tracker, features, lambda, mut mc_rng) = bound_instance(2_000 + k as u64);
        let probs = random_probs(1, head.num_classes(), &mut mc_rng);
        let batch = UnlabeledBatch::new(features, probs).unwrap();
        let bound = consistency_surrogate(&batch, &head, &tracker, lambda).unwrap().loss;
        let mc = mc_expected_kl(&batch, &head, &tracker, lambda, BOUND_DRAWS, &mc_rng).unwrap();
        let margin = (bound - mc.estimate) / mc.std_error.max(f64::MIN_POSITIVE);
        ok += usize::from(bound >= mc.estimate - BOUND_SIGMAS * mc.std_error);
        worst = worst.min(margin);
    }
    outcome(ok == BOUND_INSTANCES, format!("{ok}/{BOUND_INSTANCES} instances, smallest margin {worst:.2} stderr"))
}

// ---- 3: zero strength ---------------------------------------------------

const REDUCTION_TOL: f64 = 1e-12;

fn zero_strength_reduction() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..1000u64 {
        let mut rng = Rng::seed_from(3_000 + k);
        let c = 2 + rng.below(9);
        let a = 1 + rng.below(12);
        let n = 1 + rng.below(8);
        let mode = MODES[k as usize % 4];
        let head = random_head(c, a, &mut rng);
        let tracker = random_tracker(c, a, mode, &mut rng);
        let features = Mat::from_vec(n, a, normals(n * a, 2.0, &mut rng)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let probs = random_probs(n, c, &mut rng);

        let hard: f64 =
            (0..n).map(|i| oracle_ce(&oracle_logits(&head, features.row(i)), labels[i])).sum::<f64>() / n as f64;
        let soft: f64 = (0..n)
            .map(|i| {
                let z = oracle_logits(&head, features.row(i));
                (0..c).map(|j| probs[(i, j)] * oracle_ce(&z, j)).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;

        let lb = LabeledBatch::new(features.clone(), labels).unwrap();
        let ub = UnlabeledBatch::new(features, probs).unwrap();
        let sur = surrogate_loss_at(&lb, &head, &tracker, 0.0).unwrap().loss;
        let ce = cross_entropy(&lb, &head).unwrap().loss;
        let cons = consistency_surrogate(&ub, &head, &tracker, 0.0).unwrap().loss;
        let sce = soft_cross_entropy(&ub, &head).unwrap();
        for d in [sur - ce, sur - hard, cons - sce, cons - soft] {
            worst = worst.max(d.abs());
        }
    }
    outcome(
        worst < REDUCTION_TOL,
        format!("1000 instances, max |difference| {worst:.2e} (tolerance {REDUCTION_TOL:.0e})"),
    )
}

// ---- 4: tightness -------------------------------------------------------

const TIGHTNESS_DRAWS: usize = 1000;
const TIGHTNESS_REL_GAP: f64 = 0.10;
const TIGHTNESS_RAMP_EPOCHS: usize = 10;

fn tightness_during_training() -> Outcome {
    // overlapping classes keep the loss at O(1), the regime where most of
    // it comes from moderate margins; on near-separable tasks the residual
    // loss sits on a few samples with large augmented margin variance and
    // the bound is several times the expectation
    let overlapping =
        SyntheticConfig { separation: 1.0, cov: CovSpec::Isotropic { variance: 1.0 }, ..synthetic_config(0) };
    let (_, train) = generate_synthetic(overlapping, TRAIN_PER_CLASS).unwrap();
    let probe_idx: Vec<usize> = (0..train.len()).step_by(4).collect();
    let probe = train.subset(&probe_idx);
    let config = TrainConfig { ramp_epochs: Some(TIGHTNESS_RAMP_EPOCHS), ..generalization_config(0) };
    let lambda0 = config.lambda0;
    let mut trainer =
        Trainer::from_spec(config, &generalization_model(), train.input_dim(), train.num_classes).unwrap();
    let mut rows: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    let mc_root = Rng::seed_from(44);
    let mut observe = |t: &Trainer, m: &EpochMetrics| -> isda::Result<()> {
        let s = &t.state;
        let batch = LabeledBatch::new(s.model.features(&probe.inputs)?, probe.labels.clone())?;
        let bound = surrogate_loss_at(&batch, &s.head, &s.tracker, m.lambda)?.loss;
        let mc =
            mc_expected_ce(&batch, &s.head, &s.tracker, m.lambda, TIGHTNESS_DRAWS, &mc_root.split(m.epoch as u64))?;
        rows.push((m.epoch, m.lambda, bound, mc.estimate, mc.std_error));
        Ok(())
    };
    trainer.fit(&train, None, None, &mut observe).unwrap();

    let mut negative = 0;
    let (mut loose, mut worst_rel) = (0, 0.0f64);
    for &(epoch, lambda, bound, mc, se) in &rows {
        let gap = bound - mc;
        negative += usize::from(gap < -BOUND_SIGMAS * se);
        if epoch >= TIGHTNESS_RAMP_EPOCHS {
            assert_eq!(lambda, lambda0);
            let rel = gap / bound;
            worst_rel = worst_rel.max(rel);
            loose += usize::from(rel >= TIGHTNESS_REL_GAP);
        }
    }
    let after = rows.len() - TIGHTNESS_RAMP_EPOCHS;
    outcome(
        negative == 0 && loose == 0 && after > 0,
        format!(
            "{} epochs, {negative} statistically negative gaps, largest post-ramp gap {:.2}% of the surrogate over {after} epochs (final surrogate {:.4}, MC {:.4})",
            rows.len(),
            100.0 * worst_rel,
            rows[rows.len() - 1].2,
            rows[rows.len() - 1].3
        ),
    )
}

// ---- 5: explicit to implicit --------------------------------------------

const CONVERGENCE_SEEDS: usize = 50;
const CONVERGENCE_M: [usize; 4] = [1, 10, 100, 10_000];
const STDERR_RATIO_BAND: f64 = 1.5;

fn explicit_convergence() -> Outcome {
    let mut rng = Rng::seed_from(5_000);
    let (c, a, n) = (5, 6, 8);
    let head = random_head(c, a, &mut rng);
    let tracker = random_tracker(c, a, CovMode::Full, &mut rng);
    let features = Mat::from_vec(n, a, normals(n * a, 1.0, &mut rng)).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let batch = LabeledBatch::new(features, labels).unwrap();
    let lambda = 1.0;
    let reference = mc_expected_ce(&batch, &head, &tracker, lambda, BOUND_DRAWS, &Rng::seed_from(5_001)).unwrap();

    let stats: Vec<(f64, f64)> = CONVERGENCE_M
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = (0..CONVERGENCE_SEEDS)
                .map(|s| explicit_loss(&batch, &head, &tracker, lambda, m, &Rng::seed_from(50_000 + s as u64)).unwrap())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            (mean, var.sqrt())
        })
        .collect();

    let err: Vec<f64> = stats.iter().map(|(mean, _)| (mean - reference.estimate).abs()).collect();
    let noise: Vec<f64> = stats
        .iter()
        .map(|(_, sd)| ((sd * sd) / CONVERGENCE_SEEDS as f64 + reference.std_error.powi(2)).sqrt())
        .collect();
    let shrinks = (1..err.len())
        .all(|k| err[k] <= err[k - 1] + BOUND_SIGMAS * (noise[k] * noise[k] + noise[k - 1] * noise[k - 1]).sqrt());
    let settles = err[err.len() - 1] <= BOUND_SIGMAS * noise[noise.len() - 1];
    let ratios: Vec<f64> =
        CONVERGENCE_M.iter().zip(&stats).map(|(&m, (_, sd))| sd * (m as f64).sqrt() / stats[0].1).collect();
    let in_band = ratios.iter().all(|r| (1.0 / STDERR_RATIO_BAND..=STDERR_RATIO_BAND).contains(r));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", ");
    outcome(
        shrinks && settles && in_band,
        format!(
            "|mean - reference| [{}] vs noise [{}], sqrt(M)-scaled stderr ratios [{}]",
            fmt(&err),
            fmt(&noise),
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

// ---- 6: gradients -------------------------------------------------------

const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central<F: Fn(f64) -> f64>(f: F) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Relative error of the stacked W, b and feature gradients.
fn check_grads<L>(head: &ClassifierHead, features: &Mat, loss: L, grads: &isda::LossReport) -> f64
where
    L: Fn(&ClassifierHead, &Mat) -> f64,
{
    let mut num_w = vec![0.0; head.weight.as_slice().len()];
    for (k, g) in num_w.iter_mut().enumerate() {
        *g = central(|h| {
            let mut p = head.clone();
            p.weight.as_mut_slice()[k] += h;
            loss(&p, features)
        });
    }
    let mut num_b = vec![0.0; head.bias.len()];
    for (k, g) in num_b.iter_mut().enumerate() {
        *g = central(|h| {
            let mut p = head.clone();
            p.bias[k] += h;
            loss(&p, features)
        });
    }
    let mut num_f = vec![0.0; features.as_slice().len()];
    for (k, g) in num_f.iter_mut().enumerate() {
        *g = central(|h| {
            let mut x = features.clone();
            x.as_mut_slice()[k] += h;
            loss(head, &x)
        });
    }
    // one vector per instance: a tensor whose entries cancel to ~1e-7 would
    // otherwise be judged against finite-difference roundoff alone
    let analytic: Vec<f64> = [grads.grad_weight.as_slice(), &grads.grad_bias, grads.grad_features.as_slice()].concat();
    rel_err(&analytic, &[num_w, num_b, num_f].concat())
}

fn gradient_correctness() -> Outcome {
    let (mut worst_sur, mut worst_cons): (f64, f64) = (0.0, 0.0);
    let mut checks = 0;
    for k in 0..50u64 {
        let mut rng = Rng::seed_from(6_000 + k);
        let c = 2 + rng.below(5);
        let a = 2 + rng.below(5);
        let n = 1 + rng.below(4);
        let head = random_head(c, a, &mut rng);
        let features = Mat::from_vec(n, a, normals(n * a, 1.0, &mut rng)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let probs = random_probs(n, c, &mut rng);
        let lambda = rng.uniform_in(0.1, 2.0);
        for mode in MODES {
            let tracker = random_tracker(c, a, mode, &mut rng);
            let lb = LabeledBatch::new(features.clone(), labels.clone()).unwrap();
            let rep = surrogate_loss_at(&lb, &head, &tracker, lambda).unwrap();
            let sur = |h: &ClassifierHead, x: &Mat| {
                surrogate_loss_at(&LabeledBatch::new(x.clone(), labels.clone()).unwrap(), h, &tracker, lambda)
                    .unwrap()
                    .loss
            };
            worst_sur = worst_sur.max(check_grads(&head, &features, sur, &rep));

            let ub = UnlabeledBatch::new(features.clone(), probs.clone()).unwrap();
            let rep = consistency_surrogate(&ub, &head, &tracker, lambda).unwrap();
            let cons = |h: &ClassifierHead, x: &Mat| {
                consistency_surrogate(&UnlabeledBatch::new(x.clone(), probs.clone()).unwrap(), h, &tracker, lambda)
                    .unwrap()
                    .loss
            };
            worst_cons = worst_cons.max(check_grads(&head, &features, cons, &rep));
            checks += 2;
        }
    }
    outcome(
        worst_sur < GRAD_TOL && worst_cons < GRAD_TOL,
        format!("{checks} loss/mode checks, worst relative error {worst_sur:.1e} (labeled) {worst_cons:.1e} (soft)"),
    )
}

// ---- 7: streaming statistics --------------------------------------------

const STREAM_TOL: f64 = 1e-10;

/// Two-pass population statistics per class: means and covariances.
fn two_pass(x: &Mat, labels: &[usize], c: usize) -> (Vec<usize>, Vec<Vec<f64>>, Vec<Mat>) {
    let a = x.cols();
    let mut counts = vec![0; c];
    let mut means = vec![vec![0.0; a]; c];
    for (row, &y) in x.row_iter().zip(labels) {
        counts[y] += 1;
        means[y].iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut covs = vec![Mat::zeros(a, a); c];
    for (row, &y) in x.row_iter().zip(labels) {
        for p in 0..a {
            for q in 0..a {
                covs[y][(p, q)] += (row[p] - means[y][p]) * (row[q] - means[y][q]);
            }
        }
    }
    for (s, &n) in covs.iter_mut().zip(&counts) {
        s.scale(1.0 / n as f64);
    }
    (counts, means, covs)
}

fn rel_frob(got: &Mat, want: &Mat) -> f64 {
    got.frobenius_dist(want) / want.frobenius().max(f64::MIN_POSITIVE)
}

fn stream(x: &Mat, labels: &[usize], c: usize, mode: CovMode, batches: &[Vec<usize>]) -> CovarianceTracker {
    let mut t = CovarianceTracker::new(c, x.cols(), mode).unwrap();
    for b in batches {
        let ys: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
        t.update(&x.select_rows(b), &ys).unwrap();
    }
    t
}

fn streaming_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let mut rng = Rng::seed_from(7_000 + k);
        let c = 2 + rng.below(5);
        let a = 2 + rng.below(7);
        let n = 50 + rng.below(250);
        // every class gets at least two rows
        let labels: Vec<usize> = (0..n).map(|i| if i < 2 * c { i % c } else { rng.below(c) }).collect();
        let offsets: Vec<Vec<f64>> = (0..c).map(|_| normals(a, 5.0, &mut rng)).collect();
        let mut x = Mat::zeros(n, a);
        for i in 0..n {
            let s = rng.uniform_in(0.2, 3.0);
            for d in 0..a {
                x[(i, d)] = offsets[labels[i]][d] + s * rng.normal();
            }
        }
        let (counts, means, covs) = two_pass(&x, &labels, c);
        let mut pooled = Mat::zeros(a, a);
        for (s, &m) in covs.iter().zip(&counts) {
            pooled.add_scaled(m as f64 / n as f64, s).unwrap();
        }

        let perm = rng.permutation(n);
        let mut batches = Vec::new();
        let mut pos = 0;
        while pos < n {
            let len = (1 + rng.below(40)).min(n - pos);
            batches.push(perm[pos..pos + len].to_vec());
            pos += len;
        }
        let mut reordered = batches.clone();
        rng.shuffle(&mut reordered);

        for mode in [CovMode::Full, CovMode::Diagonal, CovMode::Shared] {
            for order in [&batches, &reordered] {
                let t = stream(&x, &labels, c, mode, order);
                for j in 0..c {
                    assert_eq!(t.count(j), counts[j] as u64);
                    let mean_err = t.mean(j).iter().zip(&means[j]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
                        / means[j].iter().map(|v| v.abs()).fold(f64::MIN_POSITIVE, f64::max);
                    let want = match mode {
                        CovMode::Full => covs[j].clone(),
                        CovMode::Diagonal => Mat::from_diag(&covs[j].diag()),
                        _ => pooled.clone(),
                    };
                    worst = worst.max(mean_err).max(rel_frob(&t.covariance(j).unwrap(), &want));
                }
            }
        }
    }
    outcome(worst < STREAM_TOL, format!("20 datasets x 3 modes x 2 batch orders, worst relative error {worst:.1e}"))
}

// ---- 8, 10: synthetic generalization ------------------------------------

const GENERALIZATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TRAIN_PER_CLASS: usize = 200;
const TEST_PER_CLASS: usize = 2000;
const LABELED_FRACTION: f64 = 0.1;

/// Ten classes in sixteen dimensions; each class has a strong nuisance
/// direction orthogonal to the mean differences, and class scales differ.
fn synthetic_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_classes: 10,
        dim: 16,
        separation: 1.5,
        cov: CovSpec::Anisotropic { base: 0.05, dominant: 4.0, orthogonal: true, spread: 1.5 },
        seed: 100 + seed,
    }
}

fn synthetic_task(seed: u64) -> (isda::data::SyntheticTask, Dataset) {
    generate_synthetic(synthetic_config(seed), TRAIN_PER_CLASS).unwrap()
}

fn generalization_model() -> ModelSpec {
    ModelSpec { hidden: vec![64], feature_dim: 32, slope: 0.1 }
}

fn generalization_config(seed: u64) -> TrainConfig {
    let epochs = 30;
    TrainConfig {
        epochs,
        batch_size: 64,
        seed,
        lambda0: 0.5,
        sgd: SgdConfig {
            lr: LrSchedule { initial: 0.05, milestones: vec![(epochs / 2, 0.1), (3 * epochs / 4, 0.1)] },
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        eval_last_k: 5,
        ..TrainConfig::default()
    }
}

fn test_error(config: TrainConfig, labeled: &Dataset, unlabeled: Option<&Mat>, test: &Dataset) -> f64 {
    let mut t = Trainer::from_spec(config, &generalization_model(), labeled.input_dim(), labeled.num_classes).unwrap();
    t.fit(labeled, unlabeled, Some(test), &mut ()).unwrap();
    t.reported_error().unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn generalization_direction() -> Outcome {
    let (mut ce, mut isda, mut sup, mut semi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in GENERALIZATION_SEEDS {
        let (task, train) = synthetic_task(seed);
        let test = task.sample(TEST_PER_CLASS, 9_999 + seed);
        let base = generalization_config(seed);
        ce.push(test_error(TrainConfig { lambda0: 0.0, ..base.clone() }, &train, None, &test));
        isda.push(test_error(base.clone(), &train, None, &test));

        let num_labeled = (LABELED_FRACTION * train.len() as f64).round() as usize;
        let split = split_semi(&train, num_labeled, seed).unwrap();
        let labeled = split.remerge_validation();
        sup.push(test_error(base.clone(), &labeled, None, &test));
        semi.push(test_error(base, &labeled, Some(&split.unlabeled), &test));
    }
    let (ce, isda, sup, semi) = (mean(&ce), mean(&isda), mean(&sup), mean(&semi));
    outcome(
        isda <= ce && semi <= sup,
        format!("mean test error: lambda0=0 {ce:.5}, lambda0=0.5 {isda:.5}; supervised 10% {sup:.5}, semi-supervised {semi:.5}"),
    )
}

fn ablation_ordering() -> Outcome {
    let (mut full, mut ident) = (Vec::new(), Vec::new());
    for seed in GENERALIZATION_SEEDS {
        let (task, train) = synthetic_task(seed);
        let test = task.sample(TEST_PER_CLASS, 9_999 + seed);
        let base = generalization_config(seed);
        full.push(test_error(base.clone(), &train, None, &test));
        ident.push(test_error(TrainConfig { cov_mode: CovMode::Identity, ..base }, &train, None, &test));
    }
    let (full, ident) = (mean(&full), mean(&ident));
    outcome(full <= ident, format!("mean test error: full {full:.5}, identity {ident:.5}"))
}

// ---- 9: complexity ------------------------------------------------------

const WALL_OVERHEAD_LIMIT: f64 = 0.15;

fn desk_data(n: usize, seed: u64) -> Dataset {
    let (c, d) = (10, 3072);
    let mut rng = Rng::seed_from(seed);
    let means: Vec<Vec<f64>> = (0..c).map(|_| normals(d, 0.3, &mut rng)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut x = Mat::zeros(n, d);
    for (i, &y) in labels.iter().enumerate() {
        for (v, m) in x.row_mut(i).iter_mut().zip(&means[y]) {
            *v = m + rng.normal();
        }
    }
    Dataset::new(x, labels, c).unwrap()
}

fn complexity_accounting() -> Outcome {
    let spec = ModelSpec { hidden: vec![256], feature_dim: 64, slope: 0.1 };
    let data = desk_data(512, 9);
    let (c, a) = (10u64, 64u64);
    let mut tally_ok = true;
    for mode in MODES {
        let base = TrainConfig { epochs: 1, batch_size: 64, cov_mode: mode, ..TrainConfig::default() };
        let ce_cfg = TrainConfig { objective: Objective::CrossEntropy, ..base.clone() };
        let run = |cfg: &TrainConfig| {
            let mut t = Trainer::from_spec(cfg.clone(), &spec, data.input_dim(), data.num_classes).unwrap();
            t.fit(&data, None, None, &mut ()).unwrap();
            t
        };
        let (ce_t, isda_t) = (run(&ce_cfg), run(&base));
        let rep =
            report_timing(&isda_t.state.model, 10, (&ce_cfg, &ce_t.state.history), (&base, &isda_t.state.history))
                .unwrap();
        let want = match mode {
            CovMode::Full | CovMode::Shared => FlopTally { tracker: a * a, surrogate: c * a * a },
            CovMode::Diagonal => FlopTally { tracker: a, surrogate: c * a },
            CovMode::Identity => FlopTally { tracker: 0, surrogate: c * a },
        };
        tally_ok &= rep.extra_flops == want;
    }
    let timing_cfg = TrainConfig { batch_size: 64, ..TrainConfig::default() };
    let rep = measure_overhead(&timing_cfg, &spec, &desk_data(1024, 10), 5).unwrap();
    outcome(
        tally_ok && rep.wall_overhead < WALL_OVERHEAD_LIMIT,
        format!(
            "tally {} (full: {} + {} per sample, {:.2}% of model cost); wall {:.1} ms vs {:.1} ms, overhead {:.1}% (limit {:.0}%)",
            if tally_ok { "exact in all modes" } else { "MISMATCH" },
            rep.extra_flops.tracker,
            rep.extra_flops.surrogate,
            100.0 * rep.flop_overhead,
            rep.isda_ms,
            rep.ce_ms,
            100.0 * rep.wall_overhead,
            100.0 * WALL_OVERHEAD_LIMIT
        ),
    )
}
