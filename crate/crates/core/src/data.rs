//! Datasets: synthetic Gaussian classes, CIFAR-style binary records and
//! labeled/unlabeled/validation splits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, IsdaError, Result};
use crate::numeric::{psd_factor, sample_gaussian_into, Mat};
use crate::rng::Rng;

/// Channel-planar image geometry of a flattened input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-channel normalization statistics of pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Mat,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_shape: Option<ImageShape>,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(inputs: Mat, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return domain(format!("{} inputs with {} labels", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return domain(format!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(Dataset { inputs, labels, num_classes, image_shape: None, norm: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
            norm: self.norm.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

// ---- synthetic --------------------------------------------------------

/// Intra-class covariance of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovSpec {
    /// Point classes.
    Zero,
    /// `variance * I` for every class.
    Isotropic { variance: f64 },
    /// `base * I + dominant * u_c u_c^T` with a random unit `u_c` per class.
    /// With `orthogonal`, each `u_c` is drawn orthogonal to every
    /// difference of class means, so it carries no label information.
    /// Class `c` is further scaled by `exp(spread * (2c / (C - 1) - 1))`.
    Anisotropic {
        base: f64,
        dominant: f64,
        #[serde(default)]
        orthogonal: bool,
        #[serde(default)]
        spread: f64,
    },
    /// One covariance per class.
    Explicit { covs: Vec<Vec<Vec<f64>>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Distance scale of the class means.
    pub separation: f64,
    pub cov: CovSpec,
    pub seed: u64,
}

/// A Gaussian classification task with known class means and covariances.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Mat>,
    /// Dominant direction per class for anisotropic specs.
    pub directions: Option<Vec<Vec<f64>>>,
    factors: Vec<Mat>,
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Orthonormal basis of the span of `mu_j - mu_0` (Gram-Schmidt).
fn mean_difference_basis(means: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for m in &means[1..] {
        let mut v: Vec<f64> = m.iter().zip(&means[0]).map(|(a, b)| a - b).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

impl SyntheticTask {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        let (c, d) = (config.num_classes, config.dim);
        if c < 2 || d < 1 {
            return domain(format!("synthetic task needs >= 2 classes and dim >= 1, got {c}, {d}"));
        }
        let root = Rng::seed_from(config.seed);
        let mut mean_rng = root.split(1);
        // centred basis vectors form a regular simplex; past D0 classes fall back to random directions
        let means: Vec<Vec<f64>> = (0..c)
            .map(|j| {
                if c <= d {
                    (0..d)
                        .map(|k| {
                            let centred = if k == j { 1.0 } else { 0.0 } - if k < c { 1.0 / c as f64 } else { 0.0 };
                            config.separation * centred
                        })
                        .collect()
                } else {
                    unit_vector(d, &mut mean_rng).into_iter().map(|x| x * config.separation).collect()
                }
            })
            .collect();

        let mut dir_rng = root.split(2);
        let (covs, directions) = match &config.cov {
            CovSpec::Zero => (vec![Mat::zeros(d, d); c], None),
            CovSpec::Isotropic { variance } => {
                if *variance < 0.0 {
                    return domain("negative variance");
                }
                let mut s = Mat::identity(d);
                s.scale(*variance);
                (vec![s; c], None)
            }
            CovSpec::Anisotropic { base, dominant, orthogonal, spread } => {
                if *base < 0.0 || *dominant < 0.0 {
                    return domain("anisotropic spec needs non-negative scales");
                }
                let basis = if *orthogonal { mean_difference_basis(&means) } else { Vec::new() };
                if basis.len() >= d {
                    return domain("no direction is orthogonal to the class means");
                }
                let dirs: Vec<Vec<f64>> = (0..c)
                    .map(|_| loop {
                        let mut u = unit_vector(d, &mut dir_rng);
                        for b in &basis {
                            let p: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                            u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                        }
                        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if n > 1e-6 {
                            break u.into_iter().map(|x| x / n).collect();
                        }
                    })
                    .collect();
                let covs = dirs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        let scale = (spread * (2.0 * j as f64 / (c - 1) as f64 - 1.0)).exp();
                        let mut s = Mat::identity(d);
                        s.scale(*base);
                        for p in 0..d {
                            for q in 0..d {
                                s[(p, q)] += dominant * u[p] * u[q];
                            }
                        }
                        s.scale(scale);
                        s
                    })
                    .collect();
                (covs, Some(dirs))
            }
            CovSpec::Explicit { covs } => {
                if covs.len() != c {
                    return domain(format!("{} explicit covariances for {c} classes", covs.len()));
                }
                let covs = covs.iter().map(|rows| Mat::from_rows(rows)).collect::<Result<Vec<_>>>()?;
                if covs.iter().any(|s| s.shape() != (d, d)) {
                    return domain("explicit covariance has the wrong shape");
                }
                (covs, None)
            }
        };
        let factors = covs
            .iter()
            .map(|s| if s.as_slice().iter().all(|&v| v == 0.0) { Ok(Mat::zeros(d, d)) } else { psd_factor(s, 0.0) })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                IsdaError::Indefinite { .. } | IsdaError::Domain(_) => {
                    IsdaError::Domain(format!("covariance spec is not PSD: {e}"))
                }
                other => other,
            })?;
        Ok(SyntheticTask { config, means, covs, directions, factors })
    }

    /// `per_class` samples of every class, in class-major order.
    pub fn sample(&self, per_class: usize, seed: u64) -> Dataset {
        let (c, d) = (self.config.num_classes, self.config.dim);
        let root = Rng::seed_from(seed);
        let mut inputs = Mat::zeros(c * per_class, d);
        let mut labels = Vec::with_capacity(c * per_class);
        let mut eps = vec![0.0; d];
        for j in 0..c {
            let mut rng = root.split(j as u64);
            for i in 0..per_class {
                sample_gaussian_into(
                    &self.means[j],
                    &self.factors[j],
                    &mut rng,
                    &mut eps,
                    inputs.row_mut(j * per_class + i),
                );
                labels.push(j);
            }
        }
        Dataset { inputs, labels, num_classes: c, image_shape: None, norm: None }
    }
}

/// Builds the task and draws `per_class` samples per class with `seed`.
pub fn generate_synthetic(config: SyntheticConfig, per_class: usize) -> Result<(SyntheticTask, Dataset)> {
    let seed = config.seed;
    let task = SyntheticTask::new(config)?;
    let data = task.sample(per_class, seed.wrapping_add(0x5EED));
    Ok((task, data))
}

// ---- binary records ---------------------------------------------------

/// Raw records: one label byte followed by `H * W * K` channel-planar pixel bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecords {
    pub shape: ImageShape,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

pub fn parse_records(bytes: &[u8], shape: ImageShape, num_classes: usize) -> Result<RawRecords> {
    let record = 1 + shape.len();
    if shape.is_empty() {
        return domain("image shape must be non-empty");
    }
    if !bytes.len().is_multiple_of(record) {
        return Err(IsdaError::Format(format!(
            "{} bytes is not a whole number of {record}-byte records (truncated file?)",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * shape.len());
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        if rec[0] as usize >= num_classes {
            return Err(IsdaError::Format(format!("record {i} has label {} >= {num_classes}", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(RawRecords { shape, labels, pixels })
}

impl RawRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = self.shape.len();
        let mut out = Vec::with_capacity(self.len() * (per + 1));
        for (i, &y) in self.labels.iter().enumerate() {
            out.push(y);
            out.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        out
    }

    /// Per-channel mean and std of pixels scaled to `[0, 1]`.
    pub fn channel_stats(&self) -> NormStats {
        let plane = self.shape.height * self.shape.width;
        let per = self.shape.len();
        let k = self.shape.channels;
        let mut mean = vec![0.0; k];
        let mut sq = vec![0.0; k];
        for rec in self.pixels.chunks_exact(per) {
            for ch in 0..k {
                for &p in &rec[ch * plane..(ch + 1) * plane] {
                    let v = p as f64 / 255.0;
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let std = (0..k)
            .map(|ch| {
                let m = mean[ch] / count;
                let var = (sq[ch] / count - m * m).max(0.0);
                // a constant channel normalizes by 1 instead of dividing by zero
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        NormStats { mean: mean.iter().map(|m| m / count).collect(), std }
    }

    /// Scales to `[0, 1]` and normalizes each channel; statistics default
    /// to this data's own.
    pub fn to_dataset(&self, num_classes: usize, norm: Option<NormStats>) -> Result<Dataset> {
        let norm = norm.unwrap_or_else(|| self.channel_stats());
        let k = self.shape.channels;
        if norm.mean.len() != k || norm.std.len() != k {
            return domain(format!("normalization has {} channels, images have {k}", norm.mean.len()));
        }
        let plane = self.shape.height * self.shape.width;
        let data: Vec<f64> = self
            .pixels
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let ch = (idx % self.shape.len()) / plane;
                (p as f64 / 255.0 - norm.mean[ch]) / norm.std[ch]
            })
            .collect();
        let inputs = Mat::from_vec(self.len(), self.shape.len(), data)?;
        let labels = self.labels.iter().map(|&y| y as usize).collect();
        Ok(Dataset { inputs, labels, num_classes, image_shape: Some(self.shape), norm: Some(norm) })
    }
}

/// Reads a binary record file into a normalized dataset.
pub fn load_binary_records(
    path: impl AsRef<Path>,
    shape: ImageShape,
    num_classes: usize,
    norm: Option<NormStats>,
) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_records(&bytes, shape, num_classes)?.to_dataset(num_classes, norm)
}

pub fn write_binary_records(path: impl AsRef<Path>, records: &RawRecords) -> Result<()> {
    fs::write(path, records.to_bytes())?;
    Ok(())
}

/// Quantizes a real-valued dataset to bytes with a shared affine map
/// `round(255 * (x - lo) / (hi - lo))`; returns the records and `(lo, hi)`.
pub fn quantize_to_records(data: &Dataset, shape: ImageShape) -> Result<(RawRecords, (f64, f64))> {
    if shape.len() != data.input_dim() {
        return domain(format!("shape {shape:?} does not hold {} inputs", data.input_dim()));
    }
    if data.num_classes > 256 {
        return domain("a label byte holds at most 256 classes");
    }
    let xs = data.inputs.as_slice();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = xs.iter().map(|&x| (255.0 * (x - lo) / span).round().clamp(0.0, 255.0) as u8).collect();
    let labels = data.labels.iter().map(|&y| y as u8).collect();
    Ok((RawRecords { shape, labels, pixels }, (lo, hi)))
}

/// Pad by 4 (with zeros), take a random crop back to the original size and
/// flip horizontally with probability 1/2.
pub fn augment_image(x: &[f64], shape: ImageShape, rng: &mut Rng) -> Vec<f64> {
    const PAD: usize = 4;
    let (h, w) = (shape.height, shape.width);
    let dy = rng.below(2 * PAD + 1);
    let dx = rng.below(2 * PAD + 1);
    let flip = rng.uniform() < 0.5;
    let mut out = vec![0.0; x.len()];
    for ch in 0..shape.channels {
        for r in 0..h {
            for c in 0..w {
                // position in the padded image
                let (pr, pc) = (r + dy, c + dx);
                let value = if pr < PAD || pr >= h + PAD || pc < PAD || pc >= w + PAD {
                    0.0
                } else {
                    x[ch * h * w + (pr - PAD) * w + (pc - PAD)]
                };
                let oc = if flip { w - 1 - c } else { c };
                out[ch * h * w + r * w + oc] = value;
            }
        }
    }
    out
}

// ---- semi-supervised split ---------------------------------------------

/// Partition of a dataset into labeled, unlabeled and validation parts.
#[derive(Clone, Debug)]
pub struct SemiSplit {
    pub labeled: Dataset,
    /// Inputs only; labels are stripped.
    pub unlabeled: Mat,
    pub validation: Dataset,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub validation_idx: Vec<usize>,
}

impl SemiSplit {
    /// Labeled training set with the validation samples folded back in.
    pub fn remerge_validation(&self) -> Dataset {
        let mut d = self.labeled.clone();
        let mut rows: Vec<f64> = self.labeled.inputs.as_slice().to_vec();
        rows.extend_from_slice(self.validation.inputs.as_slice());
        d.inputs = Mat::from_vec(self.labeled.len() + self.validation.len(), self.labeled.input_dim(), rows)
            .expect("labeled and validation rows share a width");
        d.labels.extend(&self.validation.labels);
        d
    }
}

/// Round-robin quotas over classes, capped by availability.
fn balanced_quota(total: usize, capacity: &[usize]) -> Vec<usize> {
    let mut quota = vec![0; capacity.len()];
    let mut left = total;
    while left > 0 {
        let mut progressed = false;
        for (q, &cap) in quota.iter_mut().zip(capacity) {
            if left == 0 {
                break;
            }
            if *q < cap {
                *q += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}

/// Class-balanced labeled subset of `num_labeled` samples, a quarter of
/// which is held out for validation; everything else becomes unlabeled.
pub fn split_semi(data: &Dataset, num_labeled: usize, seed: u64) -> Result<SemiSplit> {
    let c = data.num_classes;
    if num_labeled < c {
        return domain(format!("{num_labeled} labeled samples cannot cover {c} classes"));
    }
    if num_labeled > data.len() {
        return domain(format!("{num_labeled} labeled samples requested from {}", data.len()));
    }
    let root = Rng::seed_from(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (j, idx) in by_class.iter_mut().enumerate() {
        root.split(j as u64).shuffle(idx);
    }
    let quota = balanced_quota(num_labeled, &by_class.iter().map(Vec::len).collect::<Vec<_>>());
    let val_quota = balanced_quota(num_labeled / 4, &quota);

    let (mut labeled_idx, mut unlabeled_idx, mut validation_idx) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..c {
        let idx = &by_class[j];
        validation_idx.extend_from_slice(&idx[..val_quota[j]]);
        labeled_idx.extend_from_slice(&idx[val_quota[j]..quota[j]]);
        unlabeled_idx.extend_from_slice(&idx[quota[j]..]);
    }
    labeled_idx.sort_unstable();
    unlabeled_idx.sort_unstable();
    validation_idx.sort_unstable();
    Ok(SemiSplit {
        labeled: data.subset(&labeled_idx),
        unlabeled: data.inputs.select_rows(&unlabeled_idx),
        validation: data.subset(&validation_idx),
        labeled_idx,
        unlabeled_idx,
        validation_idx,
    })
}
