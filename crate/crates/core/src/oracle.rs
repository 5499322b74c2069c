//! Explicit augmentation and Monte-Carlo estimates of the expected losses.
//!
//! These are the brute-force counterparts of the closed-form surrogates:
//! draw `a~ ~ N(a, lambda S_y)` and average the cross-entropy (or the soft
//! cross-entropy for unlabeled samples). Every estimate carries a standard
//! error so bound checks are statistical.
//!
//! Draws for sample `i` come in fixed-size chunks, chunk `c` using the
//! stream `rng.split2(i, c)`. Results therefore do not depend on how many
//! threads evaluate them.

use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::loss::{check_dims, check_labels, ClassifierHead, LabeledBatch, LossReport};
use crate::numeric::{axpy, lse, psd_factor, sample_gaussian_into, softmax_into, Mat};
use crate::rng::Rng;
use crate::semi::{pseudo_labels, UnlabeledBatch};
use crate::tracker::{CovView, CovarianceTracker};

const CHUNK: usize = 4096;
/// Above this many draws per sample nothing is materialized.
pub const MATERIALIZE_LIMIT: usize = 10_000;

/// Running count, mean and sum of squared deviations. Merging two of these
/// is the scalar case of the tracker's pooling identity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningMoments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningMoments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count as f64;
        let m = other.count as f64;
        let total = n + m;
        let delta = other.mean - self.mean;
        self.mean += delta * (m / total);
        self.m2 += other.m2 + delta * delta * (n * m / total);
        self.count += other.count;
    }

    /// Sample variance with the `n - 1` denominator.
    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn population_variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Lower factor of `lambda * S`, or `None` when the distribution is a point mass.
pub fn augmentation_factor(view: CovView<'_>, lambda: f64) -> Result<Option<Mat>> {
    if lambda == 0.0 || view.is_zero() {
        return Ok(None);
    }
    let root = lambda.sqrt();
    let mut lower = match view {
        CovView::Full(s) => psd_factor(s, 0.0)?,
        CovView::Diagonal(d) => {
            if d.iter().any(|&v| v < 0.0) {
                return domain("negative variance on the diagonal");
            }
            Mat::from_diag(&d.iter().map(|v| v.sqrt()).collect::<Vec<_>>())
        }
        CovView::Identity(n) => Mat::identity(n),
    };
    lower.scale(root);
    Ok(Some(lower))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return domain(format!("lambda must be finite and >= 0, got {lambda}"));
    }
    Ok(())
}

/// `m` independent draws from `N(a, lambda S_y)`, one per row.
pub fn sample_augmented(
    a: &[f64],
    y: usize,
    lambda: f64,
    tracker: &CovarianceTracker,
    m: usize,
    rng: &mut Rng,
) -> Result<Mat> {
    if m < 1 {
        return domain("need at least one draw");
    }
    check_lambda(lambda)?;
    let view = tracker.view(y)?;
    if a.len() != view.dim() {
        return domain(format!("feature of length {} for dimension {}", a.len(), view.dim()));
    }
    let mut out = Mat::zeros(m, a.len());
    match augmentation_factor(view, lambda)? {
        None => (0..m).for_each(|r| out.row_mut(r).copy_from_slice(a)),
        Some(lower) => {
            let mut eps = vec![0.0; a.len()];
            for r in 0..m {
                sample_gaussian_into(a, &lower, rng, &mut eps, out.row_mut(r));
            }
        }
    }
    Ok(out)
}

/// Per-draw loss evaluated on an augmented feature.
trait DrawLoss: Sync {
    fn eval(&self, head: &ClassifierHead, feature: &[f64], logits: &mut [f64]) -> f64;
}

struct HardTarget(usize);

impl DrawLoss for HardTarget {
    #[inline]
    fn eval(&self, head: &ClassifierHead, feature: &[f64], z: &mut [f64]) -> f64 {
        head.logits_into(feature, z);
        lse(z) - z[self.0]
    }
}

struct SoftTarget<'a>(&'a [f64]);

impl DrawLoss for SoftTarget<'_> {
    #[inline]
    fn eval(&self, head: &ClassifierHead, feature: &[f64], z: &mut [f64]) -> f64 {
        head.logits_into(feature, z);
        let l = lse(z);
        self.0.iter().zip(z.iter()).map(|(p, zk)| p * (l - zk)).sum()
    }
}

/// Moments of the per-draw loss for one sample, chunked over streams.
fn sample_moments<L: DrawLoss>(
    head: &ClassifierHead,
    a: &[f64],
    lower: &Mat,
    loss: &L,
    draws: usize,
    rng: &Rng,
    sample_index: usize,
) -> RunningMoments {
    let chunks = draws.div_ceil(CHUNK);
    let parts: Vec<RunningMoments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = rng.split2(sample_index as u64, c as u64);
            let len = CHUNK.min(draws - c * CHUNK);
            let mut eps = vec![0.0; a.len()];
            let mut feat = vec![0.0; a.len()];
            let mut z = vec![0.0; head.num_classes()];
            let mut acc = RunningMoments::default();
            for _ in 0..len {
                sample_gaussian_into(a, lower, &mut stream, &mut eps, &mut feat);
                acc.push(loss.eval(head, &feat, &mut z));
            }
            acc
        })
        .collect();
    parts.iter().fold(RunningMoments::default(), |mut acc, p| {
        acc.merge(p);
        acc
    })
}

fn aggregate(per_sample: &[RunningMoments], draws: usize) -> McEstimate {
    let n = per_sample.len() as f64;
    let estimate = per_sample.iter().map(|m| m.mean).sum::<f64>() / n;
    let var_sum: f64 = per_sample.iter().map(|m| m.sample_variance() / draws as f64).sum();
    McEstimate { estimate, std_error: var_sum.sqrt() / n }
}

fn validate_labeled(
    batch: &LabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
) -> Result<()> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    check_lambda(lambda)?;
    check_dims(head, tracker, &batch.features)?;
    check_labels(&batch.labels, head.num_classes())
}

/// Monte-Carlo estimate of the expected cross-entropy under augmentation.
pub fn mc_expected_ce(
    batch: &LabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
    draws: usize,
    rng: &Rng,
) -> Result<McEstimate> {
    if draws < 2 {
        return domain("a standard error needs at least two draws");
    }
    validate_labeled(batch, head, tracker, lambda)?;
    let per_sample = labeled_moments(batch, head, tracker, lambda, draws, rng)?;
    Ok(aggregate(&per_sample, draws))
}

fn labeled_moments(
    batch: &LabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
    draws: usize,
    rng: &Rng,
) -> Result<Vec<RunningMoments>> {
    let factors = class_factors(tracker, lambda, batch.labels.iter().copied())?;
    Ok(batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let a = batch.features.row(i);
            match &factors[y] {
                Some(Some(lower)) => sample_moments(head, a, lower, &HardTarget(y), draws, rng, i),
                _ => point_mass(HardTarget(y).eval(head, a, &mut vec![0.0; head.num_classes()]), draws),
            }
        })
        .collect())
}

fn point_mass(value: f64, draws: usize) -> RunningMoments {
    RunningMoments { count: draws as u64, mean: value, m2: 0.0 }
}

/// `factors[c]` is `Some(None)` for a point mass, `Some(Some(L))` otherwise;
/// classes not needed stay `None`.
fn class_factors(
    tracker: &CovarianceTracker,
    lambda: f64,
    classes: impl Iterator<Item = usize>,
) -> Result<Vec<Option<Option<Mat>>>> {
    let mut factors: Vec<Option<Option<Mat>>> = vec![None; tracker.num_classes()];
    for y in classes {
        if factors[y].is_none() {
            factors[y] = Some(augmentation_factor(tracker.view(y)?, lambda)?);
        }
    }
    Ok(factors)
}

/// Monte-Carlo estimate of the expected soft cross-entropy of augmented
/// unlabeled features, each augmented along its pseudo label's covariance.
pub fn mc_expected_kl(
    batch: &UnlabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
    draws: usize,
    rng: &Rng,
) -> Result<McEstimate> {
    if draws < 2 {
        return domain("a standard error needs at least two draws");
    }
    if batch.is_empty() {
        return domain("empty batch");
    }
    check_lambda(lambda)?;
    check_dims(head, tracker, &batch.features)?;
    let cls = pseudo_labels(&batch.probs)?;
    let factors = class_factors(tracker, lambda, cls.iter().copied())?;
    let per_sample: Vec<RunningMoments> = cls
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let a = batch.features.row(i);
            let target = SoftTarget(batch.probs.row(i));
            match &factors[c] {
                Some(Some(lower)) => sample_moments(head, a, lower, &target, draws, rng, i),
                _ => point_mass(target.eval(head, a, &mut vec![0.0; head.num_classes()]), draws),
            }
        })
        .collect();
    Ok(aggregate(&per_sample, draws))
}

/// The naive explicit loss: mean cross-entropy over `m` augmented copies
/// of every sample. Copies are materialized up to [`MATERIALIZE_LIMIT`]
/// per sample and streamed beyond it.
pub fn explicit_loss(
    batch: &LabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
    m: usize,
    rng: &Rng,
) -> Result<f64> {
    if m < 1 {
        return domain("need at least one draw");
    }
    validate_labeled(batch, head, tracker, lambda)?;
    if m > MATERIALIZE_LIMIT {
        let per_sample = labeled_moments(batch, head, tracker, lambda, m, rng)?;
        return Ok(aggregate(&per_sample, m).estimate);
    }
    let mut total = 0.0;
    let mut z = vec![0.0; head.num_classes()];
    for (i, &y) in batch.labels.iter().enumerate() {
        let mut stream = rng.split(i as u64);
        let draws = sample_augmented(batch.features.row(i), y, lambda, tracker, m, &mut stream)?;
        let mean: f64 = draws.row_iter().map(|f| HardTarget(y).eval(head, f, &mut z)).sum::<f64>() / m as f64;
        total += mean;
    }
    Ok(total / batch.len() as f64)
}

/// Explicit loss with gradients; the augmentation noise is independent of
/// the parameters, so each copy back-propagates like a plain sample.
pub fn explicit_loss_with_grad(
    batch: &LabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
    m: usize,
    rng: &Rng,
) -> Result<LossReport> {
    if !(1..=MATERIALIZE_LIMIT).contains(&m) {
        return domain(format!("explicit training needs 1 <= M <= {MATERIALIZE_LIMIT}, got {m}"));
    }
    validate_labeled(batch, head, tracker, lambda)?;
    let c = head.num_classes();
    let scale = 1.0 / (batch.len() * m) as f64;
    let mut report = LossReport::zeros(head, batch.len());
    let mut z = vec![0.0; c];
    let mut p = vec![0.0; c];
    for (i, &y) in batch.labels.iter().enumerate() {
        let mut stream = rng.split(i as u64);
        let draws = sample_augmented(batch.features.row(i), y, lambda, tracker, m, &mut stream)?;
        for f in draws.row_iter() {
            head.logits_into(f, &mut z);
            let log_norm = softmax_into(&z, &mut p);
            report.loss += (log_norm - z[y]) * scale;
            p[y] -= 1.0;
            for (j, gj) in p.iter().enumerate() {
                let g = gj * scale;
                report.grad_bias[j] += g;
                axpy(g, f, report.grad_weight.row_mut(j));
                axpy(g, head.weight.row(j), report.grad_features.row_mut(i));
            }
        }
    }
    Ok(report)
}
