//! Implicit semantic data augmentation.
//!
//! Deep features are augmented along class-conditional covariance
//! directions. Instead of sampling augmented copies, training minimizes a
//! closed-form upper bound of the expected cross-entropy over the infinite
//! augmented set. The crate provides:
//!
//! * [`tracker`]: streaming per-class mean and covariance estimation,
//! * [`loss`]: the supervised surrogate with analytic gradients,
//! * [`semi`]: the semi-supervised consistency surrogate and combined objective,
//! * [`oracle`]: explicit augmentation and Monte-Carlo estimates of the true
//!   expected losses,
//! * [`mlp`], [`optim`], [`train`]: a small feature extractor trained with
//!   Nesterov SGD,
//! * [`data`]: synthetic Gaussian tasks, binary record loading and splits,
//! * [`complexity`]: analytic cost tallies and wall-clock overhead.

// `!(x > 0.0)` is the idiom for rejecting NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod complexity;
pub mod data;
pub mod error;
pub mod loss;
pub mod mlp;
pub mod numeric;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod semi;
pub mod tracker;
pub mod train;

pub use error::{IsdaError, Result};
pub use loss::{AugmentationConfig, ClassifierHead, LabeledBatch, LossReport, Schedule};
pub use numeric::Mat;
pub use rng::Rng;
pub use tracker::{CovMode, CovarianceTracker};
