//! Supervised surrogate loss with analytic gradients.
//!
//! For a feature `a` with label `y`, class covariance `S_y` and strength
//! `lambda`, the adjusted logits are
//!
//! ```text
//! z_j = w_j . a + b_j + (lambda / 2) (w_j - w_y)^T S_y (w_j - w_y)
//! ```
//!
//! and the per-sample loss is `logsumexp(z) - z_y`. It upper-bounds the
//! expected cross-entropy over augmented features `a + N(0, lambda S_y)` and
//! equals plain cross-entropy at `lambda = 0`. Gradients flow into `W` both
//! linearly and through the quadratic term; `S_y` is a constant.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, IsdaError, Result};
use crate::numeric::{axpy, dot, lse, softmax_into, Mat};
use crate::tracker::{CovMode, CovView, CovarianceTracker};

/// Final linear layer: `W` is `C x A` (row `j` is `w_j`), `b` has length `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(weight: Mat, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return shape(format!("weight {:?} with bias of length {}", weight.shape(), bias.len()));
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return domain("classifier head must be finite");
        }
        Ok(ClassifierHead { weight, bias })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        ClassifierHead { weight: Mat::zeros(num_classes, dim), bias: vec![0.0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// `W a + b`
    pub fn logits(&self, a: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.num_classes()];
        self.logits_into(a, &mut z);
        z
    }

    #[inline]
    pub(crate) fn logits_into(&self, a: &[f64], out: &mut [f64]) {
        for ((o, w), b) in out.iter_mut().zip(self.weight.row_iter()).zip(&self.bias) {
            *o = dot(w, a) + b;
        }
    }

    pub fn predict(&self, a: &[f64]) -> usize {
        argmax(&self.logits(a))
    }
}

/// Index of the largest entry, ties to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lambda = (t / T) * lambda0`
    LinearRamp,
    /// `lambda = lambda0`
    Constant,
}

/// Augmentation strength and its schedule.
///
/// `t` and `total` are in whatever unit the caller counts; the trainer
/// uses optimizer iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub lambda0: f64,
    pub schedule: Schedule,
    pub cov_mode: CovMode,
    pub t: u64,
    pub total: u64,
}

impl AugmentationConfig {
    pub fn new(lambda0: f64, schedule: Schedule, cov_mode: CovMode, total: u64) -> Result<Self> {
        let cfg = AugmentationConfig { lambda0, schedule, cov_mode, t: 0, total };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return domain(format!("lambda0 must be finite and >= 0, got {}", self.lambda0));
        }
        if self.total < 1 {
            return domain("total iterations must be >= 1");
        }
        if self.t > self.total {
            return domain(format!("iteration {} beyond total {}", self.t, self.total));
        }
        Ok(())
    }

    pub fn at(mut self, t: u64) -> Self {
        self.t = t.min(self.total);
        self
    }

    pub fn lambda(&self) -> f64 {
        lambda_at(self)
    }
}

pub fn lambda_at(config: &AugmentationConfig) -> f64 {
    match config.schedule {
        Schedule::LinearRamp => config.t as f64 / config.total as f64 * config.lambda0,
        Schedule::Constant => config.lambda0,
    }
}

/// Features with hard labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub features: Mat,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Mat, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return shape(format!("{} feature rows with {} labels", features.rows(), labels.len()));
        }
        Ok(LabeledBatch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean loss over the batch and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grad_weight: Mat,
    pub grad_bias: Vec<f64>,
    pub grad_features: Mat,
}

impl LossReport {
    pub(crate) fn zeros(head: &ClassifierHead, batch_len: usize) -> Self {
        LossReport {
            loss: 0.0,
            grad_weight: Mat::zeros(head.num_classes(), head.dim()),
            grad_bias: vec![0.0; head.num_classes()],
            grad_features: Mat::zeros(batch_len, head.dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.grad_weight.is_finite()
            && self.grad_bias.iter().all(|v| v.is_finite())
            && self.grad_features.is_finite()
    }
}

/// `S w_j` for every class row, and the pairwise quadratic forms
/// `q[j][k] = (w_j - w_k)^T S (w_j - w_k)` for one covariance.
pub(crate) struct PairQuad {
    pub u: Mat,
    pub q: Mat,
}

impl PairQuad {
    pub fn new(head: &ClassifierHead, view: CovView<'_>) -> Self {
        let (c, a) = head.weight.shape();
        let mut u = Mat::zeros(c, a);
        for j in 0..c {
            view.apply(head.weight.row(j), u.row_mut(j));
        }
        let mut q = Mat::zeros(c, c);
        for j in 0..c {
            for k in 0..j {
                let (wj, wk) = (head.weight.row(j), head.weight.row(k));
                let (uj, uk) = (u.row(j), u.row(k));
                let v: f64 = (0..a).map(|d| (wj[d] - wk[d]) * (uj[d] - uk[d])).sum();
                q[(j, k)] = v;
                q[(k, j)] = v;
            }
        }
        PairQuad { u, q }
    }

    /// `lambda * coeff * (u_j - u_k)` added to row `j`, subtracted from row `k`.
    #[inline]
    pub fn push_grad(&self, grad_w: &mut Mat, j: usize, k: usize, scale: f64) {
        if scale == 0.0 {
            return;
        }
        let a = self.u.cols();
        for d in 0..a {
            let g = scale * (self.u[(j, d)] - self.u[(k, d)]);
            grad_w[(j, d)] += g;
            grad_w[(k, d)] -= g;
        }
    }
}

pub(crate) fn check_dims(head: &ClassifierHead, tracker: &CovarianceTracker, features: &Mat) -> Result<()> {
    if head.num_classes() != tracker.num_classes() || head.dim() != tracker.dim() {
        return shape(format!(
            "head is {}x{}, tracker is {}x{}",
            head.num_classes(),
            head.dim(),
            tracker.num_classes(),
            tracker.dim()
        ));
    }
    if features.cols() != head.dim() {
        return shape(format!("features have {} columns, head expects {}", features.cols(), head.dim()));
    }
    Ok(())
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return domain(format!("label {bad} out of range for {num_classes} classes"));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return domain(format!("lambda must be finite and >= 0, got {lambda}"));
    }
    Ok(())
}

/// Adjusted logits of one sample.
pub fn adjusted_logits(
    a: &[f64],
    y: usize,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if head.num_classes() != tracker.num_classes() || head.dim() != tracker.dim() || a.len() != head.dim() {
        return shape("adjusted_logits dimensions disagree");
    }
    check_labels(&[y], head.num_classes())?;
    let view = tracker.view_unchecked(y);
    let mut z = head.logits(a);
    let mut v = vec![0.0; head.dim()];
    for (j, zj) in z.iter_mut().enumerate() {
        for (d, vd) in v.iter_mut().enumerate() {
            *vd = head.weight[(j, d)] - head.weight[(y, d)];
        }
        *zj += 0.5 * lambda * view.quad(&v);
    }
    Ok(z)
}

/// Surrogate loss at the strength given by `config`.
pub fn surrogate_loss(
    batch: &LabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    config: &AugmentationConfig,
) -> Result<LossReport> {
    config.validate()?;
    if config.cov_mode != tracker.mode() {
        return domain(format!("config asks for {} covariances, tracker holds {}", config.cov_mode, tracker.mode()));
    }
    surrogate_loss_at(batch, head, tracker, lambda_at(config))
}

/// Surrogate loss at an explicit `lambda`.
pub fn surrogate_loss_at(
    batch: &LabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    check_lambda(lambda)?;
    check_dims(head, tracker, &batch.features)?;
    check_labels(&batch.labels, head.num_classes())?;

    let c = head.num_classes();
    let n = batch.len();
    let inv_n = 1.0 / n as f64;

    let mut quads: Vec<Option<PairQuad>> = (0..c).map(|_| None).collect();
    // coeff[y][j]: sum over samples of class y of p_j / N
    let mut coeff = vec![vec![0.0; c]; c];
    let mut report = LossReport::zeros(head, n);
    let mut z = vec![0.0; c];
    let mut p = vec![0.0; c];

    for (i, &y) in batch.labels.iter().enumerate() {
        let quad = quads[y].get_or_insert_with(|| PairQuad::new(head, tracker.view_unchecked(y)));
        let a = batch.features.row(i);
        head.logits_into(a, &mut z);
        for (j, zj) in z.iter_mut().enumerate() {
            *zj += 0.5 * lambda * quad.q[(j, y)];
        }
        let log_norm = softmax_into(&z, &mut p);
        let li = log_norm - z[y];
        if !li.is_finite() {
            return Err(IsdaError::NonFinite { context: "surrogate loss", index: i });
        }
        report.loss += li * inv_n;

        p[y] -= 1.0;
        let ga = report.grad_features.row_mut(i);
        for (j, gj) in p.iter().enumerate() {
            let g = gj * inv_n;
            report.grad_bias[j] += g;
            axpy(g, head.weight.row(j), ga);
            axpy(g, a, report.grad_weight.row_mut(j));
        }
        p[y] += 1.0;
        for (j, pj) in p.iter().enumerate() {
            if j != y {
                coeff[y][j] += pj * inv_n;
            }
        }
    }

    for (y, quad) in quads.iter().enumerate() {
        if let Some(quad) = quad {
            for j in (0..c).filter(|&j| j != y) {
                quad.push_grad(&mut report.grad_weight, j, y, lambda * coeff[y][j]);
            }
        }
    }
    Ok(report)
}

/// Plain softmax cross-entropy, the `lambda = 0` baseline.
pub fn cross_entropy(batch: &LabeledBatch, head: &ClassifierHead) -> Result<LossReport> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    if batch.features.cols() != head.dim() {
        return shape(format!("features have {} columns, head expects {}", batch.features.cols(), head.dim()));
    }
    check_labels(&batch.labels, head.num_classes())?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut report = LossReport::zeros(head, n);
    let mut z = vec![0.0; head.num_classes()];
    for (i, &y) in batch.labels.iter().enumerate() {
        let a = batch.features.row(i);
        head.logits_into(a, &mut z);
        let li = lse(&z) - z[y];
        if !li.is_finite() {
            return Err(IsdaError::NonFinite { context: "cross-entropy", index: i });
        }
        report.loss += li * inv_n;
        let ga = report.grad_features.row_mut(i);
        let mut p = vec![0.0; z.len()];
        softmax_into(&z, &mut p);
        p[y] -= 1.0;
        for (j, gj) in p.iter().enumerate() {
            let g = gj * inv_n;
            report.grad_bias[j] += g;
            axpy(g, head.weight.row(j), ga);
            axpy(g, a, report.grad_weight.row_mut(j));
        }
    }
    Ok(report)
}

/// Surrogate of a single sample with target `label` under an arbitrary
/// covariance, evaluated directly from the pairwise differences.
pub fn sample_surrogate(head: &ClassifierHead, a: &[f64], label: usize, cov: CovView<'_>, lambda: f64) -> f64 {
    let w = &head.weight;
    let v: Vec<Vec<f64>> =
        (0..head.num_classes()).map(|j| w.row(j).iter().zip(w.row(label)).map(|(x, y)| x - y).collect()).collect();
    let z: Vec<f64> =
        (0..head.num_classes()).map(|j| dot(w.row(j), a) + head.bias[j] + 0.5 * lambda * cov.quad(&v[j])).collect();
    lse(&z) - z[label]
}

/// Per-sample cross-entropy `logsumexp(Wa + b) - (Wa + b)_y`.
pub fn sample_cross_entropy(head: &ClassifierHead, a: &[f64], y: usize) -> f64 {
    let z = head.logits(a);
    lse(&z) - z[y]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn scalar_instance(lambda_cov: f64) -> (ClassifierHead, CovarianceTracker) {
        let head = ClassifierHead::new(Mat::from_vec(2, 1, vec![1.0, -1.0]).unwrap(), vec![0.0, 0.0]).unwrap();
        let mut t = CovarianceTracker::new(2, 1, CovMode::Full).unwrap();
        if lambda_cov > 0.0 {
            // {0, 2} has population variance 1
            let x = Mat::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
            t.update(&x, &[0, 0]).unwrap();
        }
        (head, t)
    }

    #[test]
    fn lambda_schedule() {
        let ramp = AugmentationConfig::new(0.5, Schedule::LinearRamp, CovMode::Full, 100).unwrap();
        assert_eq!(ramp.at(0).lambda(), 0.0);
        assert_eq!(ramp.at(100).lambda(), 0.5);
        assert_eq!(ramp.at(50).lambda(), 0.25);
        let c = AugmentationConfig::new(7.5, Schedule::Constant, CovMode::Full, 10).unwrap();
        for t in 0..=10 {
            assert_eq!(c.at(t).lambda(), 7.5);
        }
        assert!(AugmentationConfig::new(-1.0, Schedule::Constant, CovMode::Full, 10).is_err());
        assert!(AugmentationConfig::new(1.0, Schedule::Constant, CovMode::Full, 0).is_err());
    }

    #[test]
    fn adjusted_logits_examples() {
        // label index 0 here is "class 1" of the 1-based worked example
        let (head, t) = scalar_instance(1.0);
        let z = adjusted_logits(&[1.0], 0, &head, &t, 2.0).unwrap();
        assert_eq!(z, vec![1.0, 3.0]);
        assert_eq!(adjusted_logits(&[1.0], 0, &head, &t, 0.0).unwrap(), vec![1.0, -1.0]);
        // empty class 1 has zero covariance
        assert_eq!(adjusted_logits(&[1.0], 1, &head, &t, 5.0).unwrap(), vec![1.0, -1.0]);
        assert!(adjusted_logits(&[1.0, 2.0], 0, &head, &t, 1.0).is_err());
        assert!(adjusted_logits(&[1.0], 0, &head, &t, -1.0).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let (head, t) = scalar_instance(1.0);
        let batch = LabeledBatch::new(Mat::from_vec(1, 1, vec![1.0]).unwrap(), vec![0]).unwrap();
        let r = surrogate_loss_at(&batch, &head, &t, 2.0).unwrap();
        assert!((r.loss - 2.126_928_011_042_972_5).abs() < 1e-14);
        let r0 = surrogate_loss_at(&batch, &head, &t, 0.0).unwrap();
        assert!((r0.loss - 0.126_928_011_042_972_5).abs() < 1e-15);
        let ce = cross_entropy(&batch, &head).unwrap();
        assert!((r0.loss - ce.loss).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_ln2() {
        let mut rng = Rng::seed_from(2);
        let head = ClassifierHead::zeros(2, 3);
        let mut t = CovarianceTracker::new(2, 3, CovMode::Full).unwrap();
        let x = Mat::from_vec(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        t.update(&x, &[0, 0, 0, 1, 1, 1]).unwrap();
        let batch = LabeledBatch::new(x.select_rows(&[0, 4]), vec![0, 1]).unwrap();
        let r = surrogate_loss_at(&batch, &head, &t, 1.7).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(r.grad_bias, vec![0.0, 0.0]);
        let single = LabeledBatch::new(x.select_rows(&[0]), vec![0]).unwrap();
        let r = surrogate_loss_at(&single, &head, &t, 1.7).unwrap();
        assert_eq!(r.grad_bias, vec![-0.5, 0.5]);
    }

    #[test]
    fn errors() {
        let (head, t) = scalar_instance(1.0);
        let empty = LabeledBatch::new(Mat::zeros(0, 1), vec![]).unwrap();
        assert!(surrogate_loss_at(&empty, &head, &t, 1.0).is_err());
        let bad = LabeledBatch::new(Mat::zeros(1, 1), vec![2]).unwrap();
        assert!(surrogate_loss_at(&bad, &head, &t, 1.0).is_err());
        let cfg = AugmentationConfig::new(1.0, Schedule::Constant, CovMode::Diagonal, 1).unwrap();
        let ok = LabeledBatch::new(Mat::zeros(1, 1), vec![0]).unwrap();
        assert!(surrogate_loss(&ok, &head, &t, &cfg).is_err());
    }

    #[test]
    fn non_finite_reports_sample_index() {
        let (mut head, t) = scalar_instance(1.0);
        head.weight[(0, 0)] = 1e300;
        let batch = LabeledBatch::new(Mat::from_vec(2, 1, vec![0.0, 1e10]).unwrap(), vec![1, 1]).unwrap();
        match surrogate_loss_at(&batch, &head, &t, 1.0) {
            Err(IsdaError::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn argmax_ties_to_smallest() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
