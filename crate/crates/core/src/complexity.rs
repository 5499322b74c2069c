//! Analytic cost of the augmentation terms and measured wall-clock overhead.
//!
//! Per sample, the tracker update costs one outer product (`A^2` for full
//! and shared covariances, `A` for diagonal, nothing for identity) and the
//! surrogate costs one covariance-vector product per class (`C * A^2`, or
//! `C * A` for diagonal and identity). The model's own cost is counted as
//! three times its forward multiply-adds (forward, input and weight
//! gradients) plus the `C * A` head.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{domain, Result};
use crate::mlp::Mlp;
use crate::tracker::CovMode;
use crate::train::{EpochMetrics, ModelSpec, Objective, TrainConfig, Trainer};

/// Extra per-sample operations of the augmentation, split by source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTally {
    pub tracker: u64,
    pub surrogate: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.tracker + self.surrogate
    }
}

/// Counted regardless of `lambda`: a zero strength still pays for the
/// statistics and the quadratic terms.
pub fn isda_extra_flops(mode: CovMode, num_classes: usize, dim: usize) -> FlopTally {
    let (c, a) = (num_classes as u64, dim as u64);
    match mode {
        CovMode::Full | CovMode::Shared => FlopTally { tracker: a * a, surrogate: c * a * a },
        CovMode::Diagonal => FlopTally { tracker: a, surrogate: c * a },
        CovMode::Identity => FlopTally { tracker: 0, surrogate: c * a },
    }
}

/// Per-sample training cost of the plain model with its head.
pub fn model_flops(model: &Mlp, num_classes: usize) -> u64 {
    3 * (model.forward_macs() + (num_classes * model.feature_dim()) as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub cov_mode: CovMode,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub extra_flops: FlopTally,
    pub model_flops: u64,
    /// `extra / model` from the analytic tally.
    pub flop_overhead: f64,
    pub ce_ms: f64,
    pub isda_ms: f64,
    /// `isda_ms / ce_ms - 1`
    pub wall_overhead: f64,
}

fn comparable(mut a: TrainConfig, mut b: TrainConfig) -> bool {
    a.objective = Objective::Isda;
    b.objective = Objective::Isda;
    a.lambda0 = 0.0;
    b.lambda0 = 0.0;
    a == b
}

/// Overhead of a finished ISDA run against its cross-entropy twin. The
/// configs may differ only in objective and strength.
pub fn report_timing(
    model: &Mlp,
    num_classes: usize,
    ce: (&TrainConfig, &[EpochMetrics]),
    isda: (&TrainConfig, &[EpochMetrics]),
) -> Result<TimingReport> {
    if ce.0.objective != Objective::CrossEntropy || isda.0.objective != Objective::Isda {
        return domain("report_timing needs a cross-entropy run and an ISDA run");
    }
    if !comparable(ce.0.clone(), isda.0.clone()) {
        return domain("paired runs must share every setting except objective and lambda0");
    }
    if ce.1.len() != isda.1.len() || ce.1.is_empty() {
        return domain("paired runs must have the same, non-zero number of epochs");
    }
    let ce_ms: f64 = ce.1.iter().map(|m| m.wall_ms).sum();
    let isda_ms: f64 = isda.1.iter().map(|m| m.wall_ms).sum();
    Ok(build_report(model, num_classes, isda.0.cov_mode, ce_ms, isda_ms))
}

fn build_report(model: &Mlp, num_classes: usize, mode: CovMode, ce_ms: f64, isda_ms: f64) -> TimingReport {
    let extra = isda_extra_flops(mode, num_classes, model.feature_dim());
    let base = model_flops(model, num_classes);
    TimingReport {
        cov_mode: mode,
        num_classes,
        feature_dim: model.feature_dim(),
        extra_flops: extra,
        model_flops: base,
        flop_overhead: extra.total() as f64 / base as f64,
        ce_ms,
        isda_ms,
        wall_overhead: isda_ms / ce_ms - 1.0,
    }
}

/// Times `reps` interleaved single-epoch CE and ISDA runs from identical
/// initial states and reports the median of each.
pub fn measure_overhead(config: &TrainConfig, spec: &ModelSpec, data: &Dataset, reps: usize) -> Result<TimingReport> {
    if reps == 0 {
        return domain("need at least one repetition");
    }
    let one_epoch = TrainConfig { epochs: 1, ..config.clone() };
    let ce_cfg = TrainConfig { objective: Objective::CrossEntropy, ..one_epoch.clone() };
    let isda_cfg = TrainConfig { objective: Objective::Isda, ..one_epoch };
    let make = |cfg: &TrainConfig| Trainer::from_spec(cfg.clone(), spec, data.input_dim(), data.num_classes);
    let time = |cfg: &TrainConfig| -> Result<f64> {
        let mut t = make(cfg)?;
        let start = Instant::now();
        t.run_epoch(data, None, None)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    // warm caches and the allocator before measuring
    time(&ce_cfg)?;
    time(&isda_cfg)?;
    let (mut ce, mut isda) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        ce.push(time(&ce_cfg)?);
        isda.push(time(&isda_cfg)?);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let model = make(&ce_cfg)?.state.model;
    Ok(build_report(&model, data.num_classes, config.cov_mode, median(&mut ce), median(&mut isda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::rng::Rng;

    #[test]
    fn tally_formulas() {
        assert_eq!(isda_extra_flops(CovMode::Full, 10, 64), FlopTally { tracker: 4096, surrogate: 40960 });
        assert_eq!(isda_extra_flops(CovMode::Diagonal, 10, 64), FlopTally { tracker: 64, surrogate: 640 });
        assert_eq!(isda_extra_flops(CovMode::Identity, 10, 64).tracker, 0);
        assert_eq!(isda_extra_flops(CovMode::Shared, 3, 5), isda_extra_flops(CovMode::Full, 3, 5));
    }

    #[test]
    fn doubling_dim_quadruples_quadratic_terms() {
        for c in [2, 10, 100] {
            let small = isda_extra_flops(CovMode::Full, c, 32).total();
            let big = isda_extra_flops(CovMode::Full, c, 64).total();
            assert_eq!(big, 4 * small);
        }
    }

    #[test]
    fn model_cost_counts_every_layer() {
        let mut rng = Rng::seed_from(0);
        let m = Mlp::new(&[3072, 256, 64], Activation::default(), &mut rng).unwrap();
        assert_eq!(model_flops(&m, 10), 3 * (3072 * 256 + 256 * 64 + 640));
        // desk-scale example: about 1.9% of the model cost
        let r = build_report(&m, 10, CovMode::Full, 1.0, 1.0);
        assert!(r.flop_overhead < 0.02, "{}", r.flop_overhead);
    }

    #[test]
    fn report_rejects_mismatched_runs() {
        let mut rng = Rng::seed_from(0);
        let m = Mlp::new(&[4, 3], Activation::default(), &mut rng).unwrap();
        let hist =
            vec![EpochMetrics { epoch: 0, iteration: 1, lambda: 0.0, train_loss: 1.0, test_error: 0.5, wall_ms: 10.0 }];
        let ce = TrainConfig { objective: Objective::CrossEntropy, ..TrainConfig::default() };
        let isda = TrainConfig::default();
        let r = report_timing(&m, 2, (&ce, &hist), (&isda, &hist)).unwrap();
        assert_eq!(r.wall_overhead, 0.0);
        let other = TrainConfig { batch_size: 7, ..isda.clone() };
        assert!(report_timing(&m, 2, (&ce, &hist), (&other, &hist)).is_err());
        assert!(report_timing(&m, 2, (&isda, &hist), (&isda, &hist)).is_err());
        assert!(report_timing(&m, 2, (&ce, &hist), (&isda, &[])).is_err());
    }
}
