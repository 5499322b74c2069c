//! Runtime invariant suite behind `test-props`: randomized checks of the
//! library's contracts, one line per property.

use isda::data::{generate_synthetic, CovSpec, SyntheticConfig};
use isda::loss::{cross_entropy, sample_surrogate, surrogate_loss_at};
use isda::numeric::logsumexp;
use isda::oracle::{mc_expected_ce, mc_expected_kl};
use isda::semi::{consistency_surrogate, pseudo_labels, soft_cross_entropy, UnlabeledBatch};
use isda::train::{ModelSpec, TrainConfig, Trainer};
use isda::{ClassifierHead, CovMode, CovarianceTracker, LabeledBatch, LossReport, Mat, Rng};

use crate::config::PropsConfig;

const MODES: [CovMode; 4] = [CovMode::Full, CovMode::Diagonal, CovMode::Shared, CovMode::Identity];

pub struct PropResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

type Check = fn(&PropsConfig, &Rng) -> (bool, String);

pub fn run(cfg: &PropsConfig, seed: u64) -> Vec<PropResult> {
    let checks: [(&'static str, Check); 10] = [
        ("logsumexp_shift", logsumexp_shift),
        ("bound_dominance", bound_dominance),
        ("soft_bound_dominance", soft_bound_dominance),
        ("zero_strength_reduction", zero_strength_reduction),
        ("gradients_match_finite_differences", gradients),
        ("streaming_statistics_exact", streaming),
        ("surrogate_monotone_in_lambda", monotone),
        ("soft_decomposition", decomposition),
        ("snapshot_round_trip", snapshots),
        ("training_deterministic", determinism),
    ];
    let root = Rng::seed_from(seed);
    checks
        .iter()
        .enumerate()
        .map(|(k, (name, check))| {
            let (pass, detail) = check(cfg, &root.split(k as u64));
            PropResult { name, pass, detail }
        })
        .collect()
}

// ---- instances ------------------------------------------------------------

struct Instance {
    head: ClassifierHead,
    features: Mat,
    labels: Vec<usize>,
    probs: Mat,
    lambda: f64,
    rng: Rng,
}

fn normals(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn tracker(c: usize, a: usize, mode: CovMode, rng: &mut Rng) -> CovarianceTracker {
    let mut t = CovarianceTracker::new(c, a, mode).expect("valid tracker shape");
    for j in 0..c {
        let n = 2 + rng.below(2 * a);
        let x = Mat::from_vec(n, a, normals(n * a, 0.8, rng)).expect("finite samples");
        t.update(&x, &vec![j; n]).expect("valid batch");
    }
    t
}

fn instance(root: &Rng, k: usize, max_n: usize) -> (Instance, usize, usize) {
    let mut rng = root.split(k as u64);
    let (c, a, n) = (2 + rng.below(7), 1 + rng.below(8), 1 + rng.below(max_n));
    let w = Mat::from_vec(c, a, normals(c * a, 1.0, &mut rng)).expect("finite weights");
    let head = ClassifierHead::new(w, normals(c, 0.5, &mut rng)).expect("consistent head");
    let features = Mat::from_vec(n, a, normals(n * a, 1.0, &mut rng)).expect("finite features");
    let labels = (0..n).map(|_| rng.below(c)).collect();
    let mut probs = Mat::zeros(n, c);
    for i in 0..n {
        let e: Vec<f64> = (0..c).map(|_| (2.0 * rng.normal()).exp()).collect();
        let s: f64 = e.iter().sum();
        probs.row_mut(i).iter_mut().zip(&e).for_each(|(p, v)| *p = v / s);
    }
    let lambda = rng.uniform_in(0.0, 2.0);
    let inst = Instance { head, features, labels, probs, lambda, rng: rng.split(1) };
    (inst, c, a)
}

fn summary(failures: usize, total: usize, extra: String) -> (bool, String) {
    (failures == 0, format!("{}/{total} cases pass; {extra}", total - failures))
}

// ---- checks ---------------------------------------------------------------

fn logsumexp_shift(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut rng = root.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.cases * 10 {
        let z = normals(1 + rng.below(10), 30.0, &mut rng);
        let c = rng.uniform_in(-100.0, 100.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let (Ok(a), Ok(b)) = (logsumexp(&shifted), logsumexp(&z)) else {
            return (false, "logsumexp rejected a finite input".into());
        };
        worst = worst.max((a - b - c).abs());
    }
    (worst < 1e-12, format!("max deviation {worst:.1e}"))
}

fn bound_dominance(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut fails = 0;
    let mut worst = f64::INFINITY;
    for k in 0..cfg.cases {
        let (mut inst, c, a) = instance(root, k, 3);
        let t = tracker(c, a, CovMode::Full, &mut inst.rng);
        let batch = LabeledBatch::new(inst.features, inst.labels).expect("consistent batch");
        let (Ok(bound), Ok(mc)) = (
            surrogate_loss_at(&batch, &inst.head, &t, inst.lambda),
            mc_expected_ce(&batch, &inst.head, &t, inst.lambda, cfg.draws, &inst.rng),
        ) else {
            fails += 1;
            continue;
        };
        let z = (bound.loss - mc.estimate) / mc.std_error.max(f64::MIN_POSITIVE);
        worst = worst.min(z);
        fails += usize::from(bound.loss < mc.estimate - 3.0 * mc.std_error);
    }
    summary(fails, cfg.cases, format!("smallest margin {worst:.2} stderr"))
}

fn soft_bound_dominance(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut fails = 0;
    let mut worst = f64::INFINITY;
    for k in 0..cfg.cases {
        let (mut inst, c, a) = instance(root, k, 3);
        let t = tracker(c, a, CovMode::Full, &mut inst.rng);
        let batch = UnlabeledBatch::new(inst.features, inst.probs).expect("valid probabilities");
        let (Ok(bound), Ok(mc)) = (
            consistency_surrogate(&batch, &inst.head, &t, inst.lambda),
            mc_expected_kl(&batch, &inst.head, &t, inst.lambda, cfg.draws, &inst.rng),
        ) else {
            fails += 1;
            continue;
        };
        let z = (bound.loss - mc.estimate) / mc.std_error.max(f64::MIN_POSITIVE);
        worst = worst.min(z);
        fails += usize::from(bound.loss < mc.estimate - 3.0 * mc.std_error);
    }
    summary(fails, cfg.cases, format!("smallest margin {worst:.2} stderr"))
}

fn zero_strength_reduction(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for k in 0..cfg.cases {
        let (mut inst, c, a) = instance(root, k, 6);
        let t = tracker(c, a, MODES[k % 4], &mut inst.rng);
        let lb = LabeledBatch::new(inst.features.clone(), inst.labels).expect("consistent batch");
        let ub = UnlabeledBatch::new(inst.features, inst.probs).expect("valid probabilities");
        let pairs = [
            surrogate_loss_at(&lb, &inst.head, &t, 0.0)
                .map(|r| r.loss)
                .and_then(|s| Ok(s - cross_entropy(&lb, &inst.head)?.loss)),
            consistency_surrogate(&ub, &inst.head, &t, 0.0)
                .map(|r| r.loss)
                .and_then(|s| Ok(s - soft_cross_entropy(&ub, &inst.head)?)),
        ];
        for d in pairs {
            worst = worst.max(d.map(f64::abs).unwrap_or(f64::INFINITY));
        }
    }
    (worst < 1e-12, format!("max |difference| {worst:.1e}"))
}

fn fd_error(head: &ClassifierHead, x: &Mat, rep: &LossReport, loss: &dyn Fn(&ClassifierHead, &Mat) -> f64) -> f64 {
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for k in 0..head.weight.as_slice().len() {
        let (mut p, mut m) = (head.clone(), head.clone());
        p.weight.as_mut_slice()[k] += h;
        m.weight.as_mut_slice()[k] -= h;
        numeric.push((loss(&p, x) - loss(&m, x)) / (2.0 * h));
        analytic.push(rep.grad_weight.as_slice()[k]);
    }
    for k in 0..head.bias.len() {
        let (mut p, mut m) = (head.clone(), head.clone());
        p.bias[k] += h;
        m.bias[k] -= h;
        numeric.push((loss(&p, x) - loss(&m, x)) / (2.0 * h));
        analytic.push(rep.grad_bias[k]);
    }
    for k in 0..x.as_slice().len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.as_mut_slice()[k] += h;
        m.as_mut_slice()[k] -= h;
        numeric.push((loss(head, &p) - loss(head, &m)) / (2.0 * h));
        analytic.push(rep.grad_features.as_slice()[k]);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn gradients(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for k in 0..cfg.cases {
        let (mut inst, c, a) = instance(root, k, 4);
        let lambda = inst.lambda.max(0.1);
        for mode in MODES {
            let t = tracker(c, a, mode, &mut inst.rng);
            let labels = inst.labels.clone();
            let sur = |h: &ClassifierHead, x: &Mat| {
                LabeledBatch::new(x.clone(), labels.clone())
                    .and_then(|b| surrogate_loss_at(&b, h, &t, lambda))
                    .map_or(f64::NAN, |r| r.loss)
            };
            let probs = inst.probs.clone();
            let cons = |h: &ClassifierHead, x: &Mat| {
                UnlabeledBatch::new(x.clone(), probs.clone())
                    .and_then(|b| consistency_surrogate(&b, h, &t, lambda))
                    .map_or(f64::NAN, |r| r.loss)
            };
            let lb = LabeledBatch::new(inst.features.clone(), labels.clone()).expect("consistent batch");
            let ub = UnlabeledBatch::new(inst.features.clone(), probs.clone()).expect("valid probabilities");
            match (surrogate_loss_at(&lb, &inst.head, &t, lambda), consistency_surrogate(&ub, &inst.head, &t, lambda)) {
                (Ok(r1), Ok(r2)) => {
                    worst = worst.max(fd_error(&inst.head, &inst.features, &r1, &sur));
                    worst = worst.max(fd_error(&inst.head, &inst.features, &r2, &cons));
                }
                _ => worst = f64::INFINITY,
            }
        }
    }
    (worst < 1e-5, format!("worst stacked relative error {worst:.1e} over 4 modes x 2 losses"))
}

fn streaming(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for k in 0..cfg.cases {
        let mut rng = root.split(k as u64);
        let (c, a, n) = (2 + rng.below(4), 1 + rng.below(6), 20 + rng.below(100));
        let labels: Vec<usize> = (0..n).map(|i| if i < 2 * c { i % c } else { rng.below(c) }).collect();
        let mut x = Mat::from_vec(n, a, normals(n * a, 1.0, &mut rng)).expect("finite samples");
        x.as_mut_slice().iter_mut().for_each(|v| *v += 4.0);
        for mode in [CovMode::Full, CovMode::Diagonal, CovMode::Shared] {
            let mut whole = CovarianceTracker::new(c, a, mode).expect("valid tracker shape");
            whole.update(&x, &labels).expect("valid batch");
            let mut parts = CovarianceTracker::new(c, a, mode).expect("valid tracker shape");
            let perm = rng.permutation(n);
            let mut pos = 0;
            while pos < n {
                let len = (1 + rng.below(16)).min(n - pos);
                let idx = &perm[pos..pos + len];
                let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                parts.update(&x.select_rows(idx), &ys).expect("valid batch");
                pos += len;
            }
            for j in 0..c {
                let (want, got) =
                    (whole.covariance(j).expect("class in range"), parts.covariance(j).expect("class in range"));
                worst = worst.max(got.frobenius_dist(&want) / want.frobenius().max(f64::MIN_POSITIVE));
            }
        }
    }
    (worst < 1e-10, format!("worst relative Frobenius error {worst:.1e}"))
}

fn monotone(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut fails = 0;
    for k in 0..cfg.cases {
        let (mut inst, c, a) = instance(root, k, 4);
        let t = tracker(c, a, MODES[k % 4], &mut inst.rng);
        let batch = LabeledBatch::new(inst.features, inst.labels).expect("consistent batch");
        let values: Vec<f64> = (0..=10)
            .map(|s| surrogate_loss_at(&batch, &inst.head, &t, 0.2 * s as f64).map_or(f64::NAN, |r| r.loss))
            .collect();
        fails += usize::from(!values.windows(2).all(|w| w[1] >= w[0]));
    }
    summary(fails, cfg.cases, "lambda grid 0..2".into())
}

fn decomposition(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    for k in 0..cfg.cases {
        let (mut inst, c, a) = instance(root, k, 4);
        let t = tracker(c, a, MODES[k % 4], &mut inst.rng);
        let Ok(cls) = pseudo_labels(&inst.probs) else {
            return (false, "pseudo labels rejected valid probabilities".into());
        };
        let mut direct = 0.0;
        for (i, &y) in cls.iter().enumerate() {
            let Ok(view) = t.view(y) else {
                return (false, "tracker view failed".into());
            };
            direct += (0..c)
                .map(|j| inst.probs[(i, j)] * sample_surrogate(&inst.head, inst.features.row(i), j, view, inst.lambda))
                .sum::<f64>();
        }
        direct /= cls.len() as f64;
        let batch = UnlabeledBatch::new(inst.features, inst.probs).expect("valid probabilities");
        let got = consistency_surrogate(&batch, &inst.head, &t, inst.lambda).map_or(f64::NAN, |r| r.loss);
        worst = worst.max((got - direct).abs() / direct.abs().max(1.0));
    }
    (worst < 1e-12, format!("max relative difference {worst:.1e}"))
}

fn snapshots(cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let mut fails = 0;
    for k in 0..cfg.cases {
        let mut rng = root.split(k as u64);
        let (c, a) = (1 + rng.below(5), 1 + rng.below(6));
        let t = tracker(c, a, MODES[k % 4], &mut rng);
        let ok = CovarianceTracker::from_snapshot_bytes(&t.to_snapshot_bytes()).is_ok_and(|back| back == t);
        fails += usize::from(!ok);
    }
    summary(fails, cfg.cases, "all modes".into())
}

fn determinism(_cfg: &PropsConfig, root: &Rng) -> (bool, String) {
    let synth = SyntheticConfig {
        num_classes: 3,
        dim: 4,
        separation: 2.0,
        cov: CovSpec::Isotropic { variance: 0.5 },
        seed: root.clone().next_u64(),
    };
    let Ok((_, data)) = generate_synthetic(synth, 40) else {
        return (false, "synthetic task failed".into());
    };
    let spec = ModelSpec { hidden: vec![8], feature_dim: 4, slope: 0.1 };
    let run = || -> isda::Result<Vec<u8>> {
        let cfg = TrainConfig { epochs: 3, batch_size: 16, ..TrainConfig::default() };
        let mut t = Trainer::from_spec(cfg, &spec, 4, 3)?;
        t.fit(&data, None, None, &mut ())?;
        t.state.history.iter_mut().for_each(|m| m.wall_ms = 0.0);
        Ok(t.checkpoint_bytes())
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => (a == b, format!("{} checkpoint bytes compared", a.len())),
        (Err(e), _) | (_, Err(e)) => (false, e.to_string()),
    }
}
