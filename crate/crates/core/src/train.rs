//! Mini-batch training of an [`Mlp`] feature extractor and linear head.
//!
//! One iteration: sample a batch, forward, update the covariance tracker
//! with the batch features, evaluate the loss, backpropagate, take one SGD
//! step. Every random choice comes from a stream keyed on
//! `(purpose, epoch or iteration)` off the root seed, so a run is a pure
//! function of its config and data, and resuming from a checkpoint taken at
//! an epoch boundary continues the exact same trajectory.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment_image, Dataset};
use crate::error::{domain, shape, IsdaError, Result};
use crate::loss::{
    argmax, cross_entropy, surrogate_loss, AugmentationConfig, ClassifierHead, LabeledBatch, LossReport, Schedule,
};
use crate::mlp::{Activation, Layer, Mlp, MlpGrads};
use crate::numeric::Mat;
use crate::optim::{LrSchedule, ParamSlot, SgdConfig, SgdState};
use crate::oracle::explicit_loss_with_grad;
use crate::rng::{Rng, RngState};
use crate::semi::{
    combined_loss, confident_rows, CombinedReport, PiModel, RegularizerInput, SemiWeights, UnlabeledBatch,
};
use crate::tracker::{CovMode, CovarianceTracker};

const STREAM_INIT: u64 = 0;
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_PI: u64 = 3;
const STREAM_EXPLICIT: u64 = 4;
const STREAM_AUGMENT: u64 = 5;

/// Loss on labeled batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// The implicit surrogate.
    Isda,
    /// Plain cross-entropy; the tracker is never updated.
    CrossEntropy,
    /// Cross-entropy averaged over `m` sampled augmentations per sample.
    Explicit { m: usize },
}

/// Unit of the `t / T` in the strength ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampUnit {
    Iterations,
    Epochs,
}

/// Layer sizes of the feature extractor, excluding the input width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub slope: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: vec![64], feature_dim: 32, slope: 0.1 }
    }
}

impl ModelSpec {
    /// He-initialized extractor and a head with `N(0, 1/A)` weights.
    pub fn build(&self, input_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<(Mlp, ClassifierHead)> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.feature_dim);
        let model = Mlp::new(&dims, Activation::LeakyRelu(self.slope), rng)?;
        let std = (1.0 / self.feature_dim as f64).sqrt();
        let w = (0..num_classes * self.feature_dim).map(|_| std * rng.normal()).collect();
        let head = ClassifierHead::new(Mat::from_vec(num_classes, self.feature_dim, w)?, vec![0.0; num_classes])?;
        Ok((model, head))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: Objective,
    pub lambda0: f64,
    pub schedule: Schedule,
    pub ramp_unit: RampUnit,
    /// Length of the ramp in epochs; the whole run when absent.
    pub ramp_epochs: Option<usize>,
    pub cov_mode: CovMode,
    pub sgd: SgdConfig,
    pub semi: SemiWeights,
    pub unlabeled_batch_size: usize,
    pub pi_noise: f64,
    /// Unlabeled samples whose top predicted probability is below this are
    /// left out of the consistency term; `None` keeps every sample.
    pub confidence_threshold: Option<f64>,
    /// Reported error is the mean test error of the last `eval_last_k` epochs.
    pub eval_last_k: usize,
    /// Pad-and-crop plus flip on image-shaped inputs.
    pub augment_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            seed: 0,
            objective: Objective::Isda,
            lambda0: 0.5,
            schedule: Schedule::LinearRamp,
            ramp_unit: RampUnit::Iterations,
            ramp_epochs: None,
            cov_mode: CovMode::Full,
            // decay keeps lr * lambda * top feature variance below the
            // step-size limit of the quadratic term as features grow
            sgd: SgdConfig {
                lr: LrSchedule { initial: 0.05, milestones: vec![(15, 0.1), (22, 0.1)] },
                ..SgdConfig::default()
            },
            semi: SemiWeights { eta1: 1.0, eta2: 1.0 },
            unlabeled_batch_size: 128,
            pi_noise: PiModel::default().noise_std,
            confidence_threshold: None,
            eval_last_k: 10,
            augment_inputs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return domain(format!(
                "need epochs >= 1 and batch size >= 1, got {} and {}",
                self.epochs, self.batch_size
            ));
        }
        if self.eval_last_k < 1 {
            return domain("eval_last_k must be >= 1");
        }
        if self.ramp_epochs == Some(0) {
            return domain("ramp_epochs must be >= 1");
        }
        if let Objective::Explicit { m } = self.objective {
            if m < 1 {
                return domain("explicit objective needs m >= 1");
            }
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return domain(format!("lambda0 must be finite and >= 0, got {}", self.lambda0));
        }
        if !(self.pi_noise >= 0.0) || !self.pi_noise.is_finite() {
            return domain("pi_noise must be finite and >= 0");
        }
        if let Some(t) = self.confidence_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return domain(format!("confidence_threshold must lie in (0, 1], got {t}"));
            }
        }
        self.sgd.validate()?;
        self.semi.validate()
    }

    pub fn batches_per_epoch(&self, num_labeled: usize) -> usize {
        num_labeled.div_ceil(self.batch_size)
    }

    /// Strength schedule at `iteration` (0-based) of `epoch`.
    pub fn augmentation_at(&self, num_labeled: usize, epoch: usize, iteration: u64) -> Result<AugmentationConfig> {
        let ramp = self.ramp_epochs.unwrap_or(self.epochs) as u64;
        let (t, total) = match self.ramp_unit {
            RampUnit::Iterations => (iteration, ramp * self.batches_per_epoch(num_labeled) as u64),
            RampUnit::Epochs => (epoch as u64, ramp),
        };
        Ok(AugmentationConfig::new(self.lambda0, self.schedule, self.cov_mode, total.max(1))?.at(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Iterations completed at the end of the epoch.
    pub iteration: u64,
    /// Strength used by the epoch's last iteration.
    pub lambda: f64,
    pub train_loss: f64,
    /// NaN when no test set is given.
    pub test_error: f64,
    pub wall_ms: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,iteration,lambda,train_loss,test_error,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.iteration, self.lambda, self.train_loss, self.test_error, self.wall_ms
        )
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Mlp,
    pub head: ClassifierHead,
    pub tracker: CovarianceTracker,
    pub sgd: SgdState,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
    pub history: Vec<EpochMetrics>,
    pub unlabeled_pass: u64,
    pub unlabeled_pos: usize,
}

/// Training callbacks; an error aborts training.
pub trait Observer {
    /// After every optimizer step; `iteration` counts completed steps and
    /// `lambda` is the strength that step used.
    fn on_iteration(&mut self, _trainer: &Trainer, _iteration: u64, _lambda: f64) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _trainer: &Trainer, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

impl<F: FnMut(&Trainer, &EpochMetrics) -> Result<()>> Observer for F {
    fn on_epoch(&mut self, trainer: &Trainer, metrics: &EpochMetrics) -> Result<()> {
        self(trainer, metrics)
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn diverged(e: IsdaError, iteration: u64) -> IsdaError {
    match e {
        IsdaError::NonFinite { .. } => IsdaError::Diverged { iteration: iteration as usize },
        other => other,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Mlp, head: ClassifierHead) -> Result<Self> {
        config.validate()?;
        if model.feature_dim() != head.dim() {
            return shape(format!("model emits {} features, head expects {}", model.feature_dim(), head.dim()));
        }
        let tracker = CovarianceTracker::new(head.num_classes(), head.dim(), config.cov_mode)?;
        let state = TrainState {
            model,
            head,
            tracker,
            sgd: SgdState::new(config.sgd.clone()),
            rng: Rng::seed_from(config.seed),
            epoch: 0,
            iteration: 0,
            history: Vec::new(),
            unlabeled_pass: 0,
            unlabeled_pos: 0,
        };
        Ok(Trainer { config, state })
    }

    /// Model and head built from `spec` with the config's seed.
    pub fn from_spec(config: TrainConfig, spec: &ModelSpec, input_dim: usize, num_classes: usize) -> Result<Self> {
        let mut rng = Rng::seed_from(config.seed).split(STREAM_INIT);
        let (model, head) = spec.build(input_dim, num_classes, &mut rng)?;
        Trainer::new(config, model, head)
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(
        &mut self,
        labeled: &Dataset,
        unlabeled: Option<&Mat>,
        test: Option<&Dataset>,
        observer: &mut dyn Observer,
    ) -> Result<()> {
        while !self.is_done() {
            let metrics = self.run_epoch_observed(labeled, unlabeled, test, observer)?;
            observer.on_epoch(self, &metrics)?;
        }
        Ok(())
    }

    fn check_data(&self, labeled: &Dataset, unlabeled: Option<&Mat>) -> Result<()> {
        let s = &self.state;
        if labeled.is_empty() {
            return domain("empty labeled training set");
        }
        if labeled.input_dim() != s.model.input_dim() {
            return shape(format!(
                "inputs have {} columns, model expects {}",
                labeled.input_dim(),
                s.model.input_dim()
            ));
        }
        if labeled.num_classes != s.head.num_classes() {
            return shape(format!("dataset has {} classes, head has {}", labeled.num_classes, s.head.num_classes()));
        }
        if let Some(u) = unlabeled {
            if u.rows() > 0 && u.cols() != s.model.input_dim() {
                return shape("unlabeled inputs have the wrong width");
            }
        }
        Ok(())
    }

    fn maybe_augment(&self, data: &Dataset, mut x: Mat, key: u64) -> Mat {
        if let (true, Some(shape)) = (self.config.augment_inputs, data.image_shape) {
            let mut rng = self.state.rng.split2(STREAM_AUGMENT, key);
            for r in 0..x.rows() {
                let y = augment_image(x.row(r), shape, &mut rng);
                x.row_mut(r).copy_from_slice(&y);
            }
        }
        x
    }

    /// Next unlabeled mini-batch, cycling through fresh permutations.
    fn next_unlabeled(&mut self, n: usize) -> Vec<usize> {
        let want = self.config.unlabeled_batch_size.min(n);
        let mut idx = Vec::with_capacity(want);
        while idx.len() < want {
            let perm = self.state.rng.split2(STREAM_UNLABELED, self.state.unlabeled_pass).permutation(n);
            let take = (want - idx.len()).min(n - self.state.unlabeled_pos);
            idx.extend_from_slice(&perm[self.state.unlabeled_pos..self.state.unlabeled_pos + take]);
            self.state.unlabeled_pos += take;
            if self.state.unlabeled_pos == n {
                self.state.unlabeled_pos = 0;
                self.state.unlabeled_pass += 1;
            }
        }
        idx
    }

    /// One pass over the labeled set.
    pub fn run_epoch(
        &mut self,
        labeled: &Dataset,
        unlabeled: Option<&Mat>,
        test: Option<&Dataset>,
    ) -> Result<EpochMetrics> {
        self.run_epoch_observed(labeled, unlabeled, test, &mut ())
    }

    /// One pass with per-iteration callbacks; `on_epoch` is left to the caller.
    pub fn run_epoch_observed(
        &mut self,
        labeled: &Dataset,
        unlabeled: Option<&Mat>,
        test: Option<&Dataset>,
        observer: &mut dyn Observer,
    ) -> Result<EpochMetrics> {
        self.check_data(labeled, unlabeled)?;
        let start = Instant::now();
        let epoch = self.state.epoch;
        let n = labeled.len();
        let perm = self.state.rng.split2(STREAM_LABELED, epoch as u64).permutation(n);
        let lr = self.config.sgd.lr.at_epoch(epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lambda = 0.0;
        for idx in perm.chunks(self.config.batch_size) {
            let aug = self.config.augmentation_at(n, epoch, self.state.iteration)?;
            lambda = aug.lambda();
            let it = self.state.iteration;
            let loss = self.step(labeled, idx, unlabeled, &aug, lr).map_err(|e| diverged(e, it))?;
            if !loss.is_finite() {
                return Err(IsdaError::Diverged { iteration: it as usize });
            }
            loss_sum += loss;
            batches += 1;
            self.state.iteration += 1;
            observer.on_iteration(self, self.state.iteration, lambda)?;
        }
        let test_error = match test {
            Some(t) => evaluate(&self.state.model, &self.state.head, t)?,
            None => f64::NAN,
        };
        self.state.epoch += 1;
        let metrics = EpochMetrics {
            epoch,
            iteration: self.state.iteration,
            lambda,
            train_loss: loss_sum / batches as f64,
            test_error,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.state.history.push(metrics.clone());
        Ok(metrics)
    }

    fn step(
        &mut self,
        data: &Dataset,
        idx: &[usize],
        unlabeled: Option<&Mat>,
        aug: &AugmentationConfig,
        lr: f64,
    ) -> Result<f64> {
        let it = self.state.iteration;
        let x = self.maybe_augment(data, data.inputs.select_rows(idx), 2 * it);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let (features, cache) = self.state.model.forward(&x)?;
        let lambda = aug.lambda();

        let report: LossReport = match self.config.objective {
            Objective::CrossEntropy => cross_entropy(&LabeledBatch::new(features, labels)?, &self.state.head)?,
            Objective::Isda => {
                self.state.tracker.update(&features, &labels)?;
                surrogate_loss(&LabeledBatch::new(features, labels)?, &self.state.head, &self.state.tracker, aug)?
            }
            Objective::Explicit { m } => {
                self.state.tracker.update(&features, &labels)?;
                let rng = self.state.rng.split2(STREAM_EXPLICIT, it);
                let batch = LabeledBatch::new(features, labels)?;
                explicit_loss_with_grad(&batch, &self.state.head, &self.state.tracker, lambda, m, &rng)?
            }
        };
        if !report.is_finite() {
            return Err(IsdaError::Diverged { iteration: it as usize });
        }
        let mut loss = report.loss;
        let (mut grads, _) = self.state.model.backward(&cache, &report.grad_features)?;
        let mut grad_w = report.grad_weight;
        let mut grad_b = report.grad_bias;

        let weights = self.config.semi;
        let unlabeled = unlabeled.filter(|u| u.rows() > 0 && (weights.eta1 > 0.0 || weights.eta2 > 0.0));
        if let Some(u) = unlabeled {
            let uidx = self.next_unlabeled(u.rows());
            let ux = self.maybe_augment(data, u.select_rows(&uidx), 2 * it + 1);
            let (ufeat, ucache) = self.state.model.forward(&ux)?;
            // targets are the current predictions, held constant
            let full = UnlabeledBatch::from_head(ufeat, &self.state.head)?;
            let kept = confident_rows(&full.probs, self.config.confidence_threshold);
            let ubatch = if kept.len() == full.len() {
                full
            } else {
                UnlabeledBatch::new(full.features.select_rows(&kept), full.probs.select_rows(&kept))?
            };
            let empty = LabeledBatch::new(Mat::zeros(0, self.state.head.dim()), Vec::new())?;
            let pi = PiModel { noise_std: self.config.pi_noise };
            let reg = RegularizerInput { regularizer: &pi, model: &self.state.model, inputs: &ux };
            let mut pi_rng = self.state.rng.split2(STREAM_PI, it);
            let mut consistency_aug = *aug;
            consistency_aug.cov_mode = self.state.tracker.mode();
            if self.config.objective == Objective::CrossEntropy {
                consistency_aug.lambda0 = 0.0;
            }
            let combined: CombinedReport = combined_loss(
                &empty,
                &ubatch,
                &self.state.head,
                &self.state.tracker,
                &consistency_aug,
                weights,
                Some(reg),
                &mut pi_rng,
            )?;
            if !combined.loss.is_finite() {
                return Err(IsdaError::Diverged { iteration: it as usize });
            }
            loss += combined.loss;
            if let Some(ur) = &combined.unlabeled {
                // filtered rows receive no consistency gradient
                let mut g = Mat::zeros(ux.rows(), ur.grad_features.cols());
                for (r, &i) in kept.iter().enumerate() {
                    g.row_mut(i).copy_from_slice(ur.grad_features.row(r));
                }
                g.scale(weights.eta1);
                let (ug, _) = self.state.model.backward(&ucache, &g)?;
                grads.add_scaled(1.0, &ug);
            }
            if let Some(rr) = &combined.regularizer {
                grads.add_scaled(weights.eta2, &rr.grad_model);
            }
            if combined.unlabeled.is_some() || combined.regularizer.is_some() {
                let (hw, hb) = combined.head_grads(&self.state.head);
                grad_w.add_scaled(1.0, &hw)?;
                grad_b.iter_mut().zip(&hb).for_each(|(a, b)| *a += b);
            }
        }
        self.apply(lr, &grads, &grad_w, &grad_b);
        if !self.state.model.is_finite() || !self.state.head.weight.is_finite() {
            return Err(IsdaError::Diverged { iteration: it as usize });
        }
        Ok(loss)
    }

    fn apply(&mut self, lr: f64, grads: &MlpGrads, grad_w: &Mat, grad_b: &[f64]) {
        let s = &mut self.state;
        let mut slots: Vec<ParamSlot<'_>> = Vec::with_capacity(2 * s.model.layers.len() + 2);
        for (layer, g) in s.model.layers.iter_mut().zip(&grads.layers) {
            slots.push(ParamSlot { value: layer.weight.as_mut_slice(), grad: g.weight.as_slice(), decay: true });
            slots.push(ParamSlot { value: &mut layer.bias, grad: &g.bias, decay: false });
        }
        slots.push(ParamSlot { value: s.head.weight.as_mut_slice(), grad: grad_w.as_slice(), decay: true });
        slots.push(ParamSlot { value: &mut s.head.bias, grad: grad_b, decay: false });
        s.sgd.step(lr, &mut slots);
    }

    /// Mean test error over the last `eval_last_k` epochs.
    pub fn reported_error(&self) -> Option<f64> {
        last_k_mean(&self.state.history, self.config.eval_last_k)
    }
}

/// Fraction of misclassified samples.
pub fn evaluate(model: &Mlp, head: &ClassifierHead, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return domain("empty evaluation set");
    }
    let logits = model.forward_logits(head, &data.inputs)?;
    let wrong = logits.row_iter().zip(&data.labels).filter(|(z, &y)| argmax(z) != y).count();
    Ok(wrong as f64 / data.len() as f64)
}

/// Mean `test_error` of the last `min(k, len)` entries.
pub fn last_k_mean(history: &[EpochMetrics], k: usize) -> Option<f64> {
    if history.is_empty() || k == 0 {
        return None;
    }
    let tail = &history[history.len().saturating_sub(k)..];
    Some(tail.iter().map(|m| m.test_error).sum::<f64>() / tail.len() as f64)
}

pub fn train_supervised(
    data: &Dataset,
    test: Option<&Dataset>,
    model: Mlp,
    head: ClassifierHead,
    config: TrainConfig,
) -> Result<Trainer> {
    let mut t = Trainer::new(config, model, head)?;
    t.fit(data, None, test, &mut ())?;
    Ok(t)
}

/// Tracker statistics come from labeled features only.
pub fn train_semi(
    labeled: &Dataset,
    unlabeled: &Mat,
    test: Option<&Dataset>,
    model: Mlp,
    head: ClassifierHead,
    config: TrainConfig,
) -> Result<Trainer> {
    let mut t = Trainer::new(config, model, head)?;
    t.fit(labeled, Some(unlabeled), test, &mut ())?;
    Ok(t)
}

// ---- checkpoints ------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"ISDACKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.f64(x));
    }
    fn mat(&mut self, m: &Mat) {
        self.u32(m.rows());
        self.u32(m.cols());
        self.f64s(m.as_slice());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        self.f64s(v);
    }
}

struct In<'a>(&'a [u8]);

impl In<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|_| IsdaError::Format("truncated checkpoint".into()))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.0.len() / 8 {
            return Err(IsdaError::Format("truncated checkpoint".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn mat(&mut self) -> Result<Mat> {
        let (r, c) = (self.u32()?, self.u32()?);
        Mat::from_vec(r, c, self.f64s(r * c)?)
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        self.f64s(n)
    }
}

impl Trainer {
    /// Versioned little-endian checkpoint of the full [`TrainState`]. The
    /// config is not included; resuming takes it as an argument.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut o = Out(Vec::new());
        o.0.extend_from_slice(CKPT_MAGIC);
        o.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        o.u64(s.epoch as u64);
        o.u64(s.iteration);
        o.u64(s.unlabeled_pass);
        o.u64(s.unlabeled_pos as u64);
        let rs = s.rng.state();
        o.0.extend_from_slice(&rs.seed);
        o.u64(rs.stream);
        o.0.extend_from_slice(&rs.word_pos.to_le_bytes());
        match s.model.activation {
            Activation::LeakyRelu(slope) => {
                o.u8(0);
                o.f64(slope);
            }
            Activation::Identity => {
                o.u8(1);
                o.f64(0.0);
            }
        }
        o.u32(s.model.layers.len());
        for l in &s.model.layers {
            o.mat(&l.weight);
            o.vec(&l.bias);
        }
        o.mat(&s.head.weight);
        o.vec(&s.head.bias);
        let cfg = &s.sgd.config;
        o.f64(cfg.lr.initial);
        o.u32(cfg.lr.milestones.len());
        for &(e, f) in &cfg.lr.milestones {
            o.u64(e as u64);
            o.f64(f);
        }
        o.f64(cfg.momentum);
        o.f64(cfg.weight_decay);
        o.u32(s.sgd.velocity.len());
        for v in &s.sgd.velocity {
            o.vec(v);
        }
        let snap = s.tracker.to_snapshot_bytes();
        o.u64(snap.len() as u64);
        o.0.extend_from_slice(&snap);
        o.u32(s.history.len());
        for m in &s.history {
            o.u64(m.epoch as u64);
            o.u64(m.iteration);
            o.f64s(&[m.lambda, m.train_loss, m.test_error, m.wall_ms]);
        }
        o.0
    }

    pub fn from_checkpoint_bytes(config: TrainConfig, bytes: &[u8]) -> Result<Self> {
        config.validate()?;
        let mut r = In(bytes);
        if &r.take::<8>()? != CKPT_MAGIC {
            return Err(IsdaError::Format("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(r.take()?);
        if version != CHECKPOINT_VERSION {
            return Err(IsdaError::Format(format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64()? as usize;
        let iteration = r.u64()?;
        let unlabeled_pass = r.u64()?;
        let unlabeled_pos = r.u64()? as usize;
        let seed = r.take::<32>()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take()?);
        let rng = Rng::from_state(RngState { seed, stream, word_pos });
        let activation = match (r.u8()?, r.f64()?) {
            (0, slope) => Activation::LeakyRelu(slope),
            (1, _) => Activation::Identity,
            (tag, _) => return Err(IsdaError::Format(format!("unknown activation tag {tag}"))),
        };
        let nl = r.u32()?;
        let mut layers = Vec::with_capacity(nl.min(1024));
        for _ in 0..nl {
            let weight = r.mat()?;
            let bias = r.vec()?;
            layers.push(Layer { weight, bias });
        }
        let model = Mlp::from_layers(layers, activation)?;
        let head = ClassifierHead::new(r.mat()?, r.vec()?)?;
        let initial = r.f64()?;
        let nm = r.u32()?;
        let mut milestones = Vec::new();
        for _ in 0..nm {
            milestones.push((r.u64()? as usize, r.f64()?));
        }
        let sgd_config =
            SgdConfig { lr: LrSchedule { initial, milestones }, momentum: r.f64()?, weight_decay: r.f64()? };
        if sgd_config != config.sgd {
            return domain("checkpoint optimizer settings differ from the config");
        }
        let nv = r.u32()?;
        let mut velocity = Vec::new();
        for _ in 0..nv {
            velocity.push(r.vec()?);
        }
        let snap_len = r.u64()? as usize;
        if snap_len > r.0.len() {
            return Err(IsdaError::Format("truncated checkpoint".into()));
        }
        let (snap, rest) = r.0.split_at(snap_len);
        let tracker = CovarianceTracker::from_snapshot_bytes(snap)?;
        r.0 = rest;
        if tracker.mode() != config.cov_mode {
            return domain("checkpoint covariance mode differs from the config");
        }
        let nh = r.u32()?;
        let mut history = Vec::new();
        for _ in 0..nh {
            let (epoch, iteration) = (r.u64()? as usize, r.u64()?);
            let v = r.f64s(4)?;
            history.push(EpochMetrics {
                epoch,
                iteration,
                lambda: v[0],
                train_loss: v[1],
                test_error: v[2],
                wall_ms: v[3],
            });
        }
        if !r.0.is_empty() {
            return Err(IsdaError::Format(format!("{} trailing bytes after checkpoint", r.0.len())));
        }
        let mut t = Trainer::new(config, model, head)?;
        t.state.tracker = tracker;
        t.state.sgd.velocity = velocity;
        t.state.rng = rng;
        t.state.epoch = epoch;
        t.state.iteration = iteration;
        t.state.history = history;
        t.state.unlabeled_pass = unlabeled_pass;
        t.state.unlabeled_pos = unlabeled_pos;
        Ok(t)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(config: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        Trainer::from_checkpoint_bytes(config, &fs::read(path)?)
    }
}
