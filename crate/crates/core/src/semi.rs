//! Semi-supervised consistency surrogate and the combined objective.
//!
//! An unlabeled feature `a` with (detached) prediction `p` is augmented along
//! the covariance of its pseudo label `argmax p`. The expected soft
//! cross-entropy of the augmented prediction against `p` is bounded by
//!
//! ```text
//! sum_k p_k [ logsumexp_j(w_j.a + b_j + lambda/2 (w_j - w_k)^T S (w_j - w_k)) - (w_k.a + b_k) ]
//! ```
//!
//! i.e. a `p`-weighted sum of supervised surrogates that all share the
//! pseudo label's covariance `S`. Minimizing the expected KL divergence to
//! `p` differs from this only by the entropy of `p`, a constant.

use crate::error::{domain, shape, IsdaError, Result};
use crate::loss::{
    argmax, check_dims, surrogate_loss, AugmentationConfig, ClassifierHead, LabeledBatch, LossReport, PairQuad,
};
use crate::mlp::{Mlp, MlpGrads};
use crate::numeric::{axpy, lse, softmax_into, Mat};
use crate::rng::Rng;
use crate::tracker::CovarianceTracker;

const ROW_SUM_TOL: f64 = 1e-9;

/// Unlabeled features with the model's own (constant) predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub features: Mat,
    pub probs: Mat,
}

impl UnlabeledBatch {
    /// Rows of `probs` must lie in `[0, 1]` and sum to one within `1e-9`.
    pub fn new(features: Mat, probs: Mat) -> Result<Self> {
        if features.rows() != probs.rows() {
            return shape(format!("{} feature rows with {} probability rows", features.rows(), probs.rows()));
        }
        validate_probs(&probs)?;
        Ok(UnlabeledBatch { features, probs })
    }

    /// Batch whose targets are `softmax(W a + b)` of the given head.
    pub fn from_head(features: Mat, head: &ClassifierHead) -> Result<Self> {
        let mut probs = Mat::zeros(features.rows(), head.num_classes());
        let mut z = vec![0.0; head.num_classes()];
        for i in 0..features.rows() {
            head.logits_into(features.row(i), &mut z);
            softmax_into(&z, probs.row_mut(i));
        }
        UnlabeledBatch::new(features, probs)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

fn validate_probs(probs: &Mat) -> Result<()> {
    for (i, row) in probs.row_iter().enumerate() {
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return domain(format!("probability row {i} has entries outside [0, 1]"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return domain(format!("probability row {i} sums to {s}"));
        }
    }
    Ok(())
}

/// Rows whose largest probability reaches `threshold`; all rows when `None`.
pub fn confident_rows(probs: &Mat, threshold: Option<f64>) -> Vec<usize> {
    let keep = |row: &[f64]| threshold.is_none_or(|t| row.iter().fold(0.0_f64, |a, &p| a.max(p)) >= t);
    probs.row_iter().enumerate().filter(|(_, r)| keep(r)).map(|(i, _)| i).collect()
}

/// Non-negative weights of the consistency and regularization terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SemiWeights {
    pub eta1: f64,
    pub eta2: f64,
}

impl SemiWeights {
    pub fn new(eta1: f64, eta2: f64) -> Result<Self> {
        let w = SemiWeights { eta1, eta2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) || !self.eta1.is_finite() || !self.eta2.is_finite() {
            return domain(format!("semi-supervised weights must be >= 0, got {self:?}"));
        }
        Ok(())
    }
}

/// Argmax of each row; ties go to the smallest class index.
pub fn pseudo_labels(probs: &Mat) -> Result<Vec<usize>> {
    validate_probs(probs)?;
    Ok(probs.row_iter().map(argmax).collect())
}

/// Consistency surrogate over an unlabeled batch (mean over samples).
///
/// Gradients reach `W`, `b` and the features; `probs` are constants.
pub fn consistency_surrogate(
    batch: &UnlabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    lambda: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return domain(format!("lambda must be finite and >= 0, got {lambda}"));
    }
    check_dims(head, tracker, &batch.features)?;
    if batch.probs.cols() != head.num_classes() {
        return shape(format!("probs have {} columns for {} classes", batch.probs.cols(), head.num_classes()));
    }
    let cov_class = pseudo_labels(&batch.probs)?;

    let c = head.num_classes();
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut quads: Vec<Option<PairQuad>> = (0..c).map(|_| None).collect();
    // coeff[cls][j * c + k]: sum over samples with pseudo label cls of p_k q^(k)_j / N
    let mut coeff: Vec<Vec<f64>> = vec![Vec::new(); c];
    let mut report = LossReport::zeros(head, n);
    let mut s = vec![0.0; c];
    let mut z = vec![0.0; c];
    let mut q = vec![0.0; c];
    let mut gs = vec![0.0; c];

    for i in 0..n {
        let cls = cov_class[i];
        let quad = quads[cls].get_or_insert_with(|| PairQuad::new(head, tracker.view_unchecked(cls)));
        let co = &mut coeff[cls];
        if co.is_empty() {
            co.resize(c * c, 0.0);
        }
        let a = batch.features.row(i);
        let p = batch.probs.row(i);
        head.logits_into(a, &mut s);
        gs.iter_mut().for_each(|g| *g = 0.0);
        let mut li = 0.0;
        for k in 0..c {
            let pk = p[k];
            if pk == 0.0 {
                continue;
            }
            for j in 0..c {
                z[j] = s[j] + 0.5 * lambda * quad.q[(j, k)];
            }
            let log_norm = softmax_into(&z, &mut q);
            li += pk * (log_norm - z[k]);
            for j in 0..c {
                gs[j] += pk * q[j];
                if j != k {
                    co[j * c + k] += pk * q[j] * inv_n;
                }
            }
        }
        if !li.is_finite() {
            return Err(IsdaError::NonFinite { context: "consistency surrogate", index: i });
        }
        report.loss += li * inv_n;
        for j in 0..c {
            gs[j] -= p[j];
        }
        let ga = report.grad_features.row_mut(i);
        for (j, gj) in gs.iter().enumerate() {
            let g = gj * inv_n;
            report.grad_bias[j] += g;
            axpy(g, head.weight.row(j), ga);
            axpy(g, a, report.grad_weight.row_mut(j));
        }
    }

    for (cls, quad) in quads.iter().enumerate() {
        if let Some(quad) = quad {
            for j in 0..c {
                for k in (0..c).filter(|&k| k != j) {
                    quad.push_grad(&mut report.grad_weight, j, k, lambda * coeff[cls][j * c + k]);
                }
            }
        }
    }
    Ok(report)
}

/// `sum_k -p_k log softmax_k(W a + b)`, averaged over the batch.
pub fn soft_cross_entropy(batch: &UnlabeledBatch, head: &ClassifierHead) -> Result<f64> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    let mut total = 0.0;
    for i in 0..batch.len() {
        let z = head.logits(batch.features.row(i));
        let l = lse(&z);
        total += batch.probs.row(i).iter().zip(&z).map(|(p, zk)| p * (l - zk)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

// ---- pluggable regularizer ------------------------------------------------

/// Loss and parameter gradients returned by a [`Regularizer`].
#[derive(Clone, Debug)]
pub struct RegReport {
    pub loss: f64,
    pub grad_model: MlpGrads,
    pub grad_weight: Mat,
    pub grad_bias: Vec<f64>,
}

/// Extra unlabeled-data term evaluated on raw inputs through the full model.
pub trait Regularizer {
    fn name(&self) -> &str;

    fn evaluate(&self, model: &Mlp, head: &ClassifierHead, inputs: &Mat, rng: &mut Rng) -> Result<RegReport>;
}

/// Perturbation consistency: mean squared distance between the softmax
/// predictions of two Gaussian-noised copies of each input. Gradients flow
/// through both branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiModel {
    pub noise_std: f64,
}

impl Default for PiModel {
    fn default() -> Self {
        PiModel { noise_std: 0.15 }
    }
}

struct Branch {
    cache: crate::mlp::ForwardCache,
    features: Mat,
    probs: Mat,
}

impl PiModel {
    fn branch(&self, model: &Mlp, head: &ClassifierHead, inputs: &Mat, rng: &mut Rng) -> Result<Branch> {
        let mut x = inputs.clone();
        x.as_mut_slice().iter_mut().for_each(|v| *v += self.noise_std * rng.normal());
        let (features, cache) = model.forward(&x)?;
        let mut probs = Mat::zeros(x.rows(), head.num_classes());
        let mut z = vec![0.0; head.num_classes()];
        for i in 0..x.rows() {
            head.logits_into(features.row(i), &mut z);
            softmax_into(&z, probs.row_mut(i));
        }
        Ok(Branch { cache, features, probs })
    }
}

impl Regularizer for PiModel {
    fn name(&self) -> &str {
        "pi_model"
    }

    fn evaluate(&self, model: &Mlp, head: &ClassifierHead, inputs: &Mat, rng: &mut Rng) -> Result<RegReport> {
        let n = inputs.rows();
        let c = head.num_classes();
        if n == 0 {
            return domain("empty batch");
        }
        let b1 = self.branch(model, head, inputs, rng)?;
        let b2 = self.branch(model, head, inputs, rng)?;
        let scale = 1.0 / (n * c) as f64;
        let mut loss = 0.0;
        let mut grad_model = MlpGrads::zeros_like(model);
        let mut grad_weight = Mat::zeros(c, head.dim());
        let mut grad_bias = vec![0.0; c];

        let mut diff = Mat::zeros(n, c);
        for i in 0..n {
            for k in 0..c {
                let d = b1.probs[(i, k)] - b2.probs[(i, k)];
                diff[(i, k)] = d;
                loss += d * d * scale;
            }
        }
        for (branch, sign) in [(&b1, 1.0), (&b2, -1.0)] {
            // dL/dprob = +-2 d / (N C); through softmax: dz_j = p_j (g_j - sum_k g_k p_k)
            let mut grad_feat = Mat::zeros(n, head.dim());
            for i in 0..n {
                let p = branch.probs.row(i);
                let g: Vec<f64> = diff.row(i).iter().map(|d| sign * 2.0 * d * scale).collect();
                let gp: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                let a = branch.features.row(i);
                for j in 0..c {
                    let dz = p[j] * (g[j] - gp);
                    grad_bias[j] += dz;
                    axpy(dz, a, grad_weight.row_mut(j));
                    axpy(dz, head.weight.row(j), grad_feat.row_mut(i));
                }
            }
            let (gm, _) = model.backward(&branch.cache, &grad_feat)?;
            grad_model.add_scaled(1.0, &gm);
        }
        Ok(RegReport { loss, grad_model, grad_weight, grad_bias })
    }
}

/// Raw inputs and model handed to the regularizer term.
pub struct RegularizerInput<'a> {
    pub regularizer: &'a dyn Regularizer,
    pub model: &'a Mlp,
    pub inputs: &'a Mat,
}

/// Combined objective: `L_sup + eta1 * L_consistency + eta2 * L_reg`.
///
/// Each part is kept unweighted; the accessors apply the weights. Empty
/// batches, zero weights and a missing regularizer contribute nothing.
#[derive(Clone, Debug)]
pub struct CombinedReport {
    pub loss: f64,
    pub weights: SemiWeights,
    pub labeled: Option<LossReport>,
    pub unlabeled: Option<LossReport>,
    pub regularizer: Option<RegReport>,
}

impl CombinedReport {
    /// Weighted gradient with respect to `(W, b)`.
    pub fn head_grads(&self, head: &ClassifierHead) -> (Mat, Vec<f64>) {
        let mut gw = Mat::zeros(head.num_classes(), head.dim());
        let mut gb = vec![0.0; head.num_classes()];
        if let Some(l) = &self.labeled {
            gw.add_scaled(1.0, &l.grad_weight).expect("head shape");
            axpy(1.0, &l.grad_bias, &mut gb);
        }
        if let Some(u) = &self.unlabeled {
            gw.add_scaled(self.weights.eta1, &u.grad_weight).expect("head shape");
            axpy(self.weights.eta1, &u.grad_bias, &mut gb);
        }
        if let Some(r) = &self.regularizer {
            gw.add_scaled(self.weights.eta2, &r.grad_weight).expect("head shape");
            axpy(self.weights.eta2, &r.grad_bias, &mut gb);
        }
        (gw, gb)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    head: &ClassifierHead,
    tracker: &CovarianceTracker,
    config: &AugmentationConfig,
    weights: SemiWeights,
    reg: Option<RegularizerInput<'_>>,
    rng: &mut Rng,
) -> Result<CombinedReport> {
    weights.validate()?;
    let mut loss = 0.0;
    let labeled_report = if labeled.is_empty() {
        None
    } else {
        let r = surrogate_loss(labeled, head, tracker, config)?;
        loss += r.loss;
        Some(r)
    };
    let unlabeled_report = if unlabeled.is_empty() || weights.eta1 == 0.0 {
        None
    } else {
        let r = consistency_surrogate(unlabeled, head, tracker, config.lambda())?;
        loss += weights.eta1 * r.loss;
        Some(r)
    };
    let reg_report = match reg {
        Some(input) if weights.eta2 != 0.0 && input.inputs.rows() > 0 => {
            let r = input.regularizer.evaluate(input.model, head, input.inputs, rng)?;
            loss += weights.eta2 * r.loss;
            Some(r)
        }
        _ => None,
    };
    Ok(CombinedReport { loss, weights, labeled: labeled_report, unlabeled: unlabeled_report, regularizer: reg_report })
}
