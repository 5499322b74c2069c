//! Streaming class-conditional feature statistics.
//!
//! Each mini-batch contributes, per class `j` present in it, a batch count
//! `m`, batch mean `mu'` and batch covariance `S'`, merged into the running
//! `(n, mu, S)` as
//!
//! ```text
//! mu  <- (n mu + m mu') / (n + m)
//! S   <- (n S + m S') / (n + m) + n m (mu - mu')(mu - mu')^T / (n + m)^2
//! n   <- n + m
//! ```
//!
//! The batch covariance uses the population convention (divide by `m`).
//! Under that convention the merge is an exact pooling identity: any
//! partition of a dataset into batches, in any order, yields the one-shot
//! population statistics of each class. With the `m - 1` convention it
//! is not.
//!
//! Tracked statistics are constants as far as the losses are concerned.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, IsdaError, Result};
use crate::numeric::{dot, Mat};

/// How the per-class covariance is stored and served.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    /// Full `A x A` covariance per class.
    Full,
    /// Per-class diagonal only, stored as a length-`A` vector.
    Diagonal,
    /// Identity for every class; tracked second moments are ignored.
    Identity,
    /// One covariance pooled over all classes, each feature centred on its
    /// own class mean.
    Shared,
}

impl CovMode {
    pub const ALL: [CovMode; 4] = [CovMode::Full, CovMode::Diagonal, CovMode::Identity, CovMode::Shared];

    pub fn tag(self) -> u8 {
        match self {
            CovMode::Full => 0,
            CovMode::Diagonal => 1,
            CovMode::Identity => 2,
            CovMode::Shared => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        CovMode::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            CovMode::Full => "full",
            CovMode::Diagonal => "diagonal",
            CovMode::Identity => "identity",
            CovMode::Shared => "shared",
        }
    }
}

impl std::fmt::Display for CovMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CovMode {
    type Err = IsdaError;

    fn from_str(s: &str) -> Result<Self> {
        CovMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IsdaError::Domain(format!("unknown covariance mode {s:?}")))
    }
}

/// Borrowed covariance served to the losses and the sampler.
#[derive(Clone, Copy, Debug)]
pub enum CovView<'a> {
    Full(&'a Mat),
    Diagonal(&'a [f64]),
    Identity(usize),
}

impl CovView<'_> {
    pub fn dim(&self) -> usize {
        match self {
            CovView::Full(m) => m.rows(),
            CovView::Diagonal(d) => d.len(),
            CovView::Identity(n) => *n,
        }
    }

    /// `out = S v`
    #[inline]
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            CovView::Full(m) => {
                for (o, r) in out.iter_mut().zip(m.row_iter()) {
                    *o = dot(r, v);
                }
            }
            CovView::Diagonal(d) => {
                for ((o, di), vi) in out.iter_mut().zip(d.iter()).zip(v) {
                    *o = di * vi;
                }
            }
            CovView::Identity(_) => out.copy_from_slice(v),
        }
    }

    /// `v^T S v`
    pub fn quad(&self, v: &[f64]) -> f64 {
        match self {
            CovView::Full(m) => m.row_iter().zip(v).map(|(r, vi)| vi * dot(r, v)).sum(),
            CovView::Diagonal(d) => d.iter().zip(v).map(|(di, vi)| di * vi * vi).sum(),
            CovView::Identity(_) => dot(v, v),
        }
    }

    pub fn to_mat(&self) -> Mat {
        match self {
            CovView::Full(m) => (*m).clone(),
            CovView::Diagonal(d) => Mat::from_diag(d),
            CovView::Identity(n) => Mat::identity(*n),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            CovView::Full(m) => m.as_slice().iter().all(|&v| v == 0.0),
            CovView::Diagonal(d) => d.iter().all(|&v| v == 0.0),
            CovView::Identity(_) => false,
        }
    }
}

/// Materialized statistics of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub class_id: usize,
    pub count: u64,
    pub mean: Vec<f64>,
    pub cov: Mat,
}

#[derive(Clone, Debug, PartialEq)]
enum Store {
    Full(Vec<Mat>),
    Diagonal(Vec<Vec<f64>>),
    Identity,
    Shared { count: u64, cov: Mat },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceTracker {
    num_classes: usize,
    dim: usize,
    mode: CovMode,
    counts: Vec<u64>,
    means: Vec<Vec<f64>>,
    store: Store,
}

/// Population statistics of the rows of one class within a batch.
struct BatchStats {
    count: usize,
    mean: Vec<f64>,
    /// Full `A x A` or diagonal-only, depending on what the store needs.
    second: Vec<f64>,
}

fn batch_stats(features: &Mat, rows: &[usize], full: bool, diag: bool) -> BatchStats {
    let a = features.cols();
    let m = rows.len() as f64;
    let mut mean = vec![0.0; a];
    for &r in rows {
        for (mu, x) in mean.iter_mut().zip(features.row(r)) {
            *mu += x;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let second = if full {
        let mut s = vec![0.0; a * a];
        let mut centred = vec![0.0; a];
        for &r in rows {
            for ((c, x), mu) in centred.iter_mut().zip(features.row(r)).zip(&mean) {
                *c = x - mu;
            }
            for i in 0..a {
                let ci = centred[i];
                // lower triangle, mirrored below
                for j in 0..=i {
                    s[i * a + j] += ci * centred[j];
                }
            }
        }
        for i in 0..a {
            for j in 0..=i {
                let v = s[i * a + j] / m;
                s[i * a + j] = v;
                s[j * a + i] = v;
            }
        }
        s
    } else if diag {
        let mut s = vec![0.0; a];
        for &r in rows {
            for ((sv, x), mu) in s.iter_mut().zip(features.row(r)).zip(&mean) {
                *sv += (x - mu) * (x - mu);
            }
        }
        s.iter_mut().for_each(|v| *v /= m);
        s
    } else {
        Vec::new()
    };
    BatchStats { count: rows.len(), mean, second }
}

impl CovarianceTracker {
    pub fn new(num_classes: usize, dim: usize, mode: CovMode) -> Result<Self> {
        if num_classes < 2 {
            return domain(format!("need at least 2 classes, got {num_classes}"));
        }
        if dim < 1 {
            return domain("feature dimension must be >= 1");
        }
        let store = match mode {
            CovMode::Full => Store::Full(vec![Mat::zeros(dim, dim); num_classes]),
            CovMode::Diagonal => Store::Diagonal(vec![vec![0.0; dim]; num_classes]),
            CovMode::Identity => Store::Identity,
            CovMode::Shared => Store::Shared { count: 0, cov: Mat::zeros(dim, dim) },
        };
        Ok(CovarianceTracker {
            num_classes,
            dim,
            mode,
            counts: vec![0; num_classes],
            means: vec![vec![0.0; dim]; num_classes],
            store,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CovMode {
        self.mode
    }

    pub fn count(&self, class_id: usize) -> u64 {
        self.counts[class_id]
    }

    pub fn mean(&self, class_id: usize) -> &[f64] {
        &self.means[class_id]
    }

    /// Number of `f64` values held.
    pub fn stored_floats(&self) -> usize {
        let means = self.num_classes * self.dim;
        means
            + match &self.store {
                Store::Full(c) => c.len() * self.dim * self.dim,
                Store::Diagonal(d) => d.len() * self.dim,
                Store::Identity => 0,
                Store::Shared { .. } => self.dim * self.dim,
            }
    }

    /// Folds one mini-batch into the running statistics.
    ///
    /// The whole batch is validated before anything is touched, so a
    /// rejected batch leaves the tracker unchanged.
    pub fn update(&mut self, features: &Mat, labels: &[usize]) -> Result<()> {
        let (b, a) = features.shape();
        if b == 0 {
            return domain("empty batch");
        }
        if a != self.dim {
            return shape(format!("features have {a} columns, tracker dim is {}", self.dim));
        }
        if labels.len() != b {
            return shape(format!("{} labels for {b} feature rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return domain(format!("label {bad} out of range for {} classes", self.num_classes));
        }
        if let Some(i) = features.row_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(IsdaError::NonFinite { context: "tracker update features", index: i });
        }

        let mut rows_by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &y) in labels.iter().enumerate() {
            rows_by_class[y].push(i);
        }
        let (full, diag) = match self.mode {
            CovMode::Full | CovMode::Shared => (true, false),
            CovMode::Diagonal => (false, true),
            CovMode::Identity => (false, false),
        };
        for (j, rows) in rows_by_class.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let batch = batch_stats(features, rows, full, diag);
            self.merge_class(j, batch);
        }
        Ok(())
    }

    fn merge_class(&mut self, j: usize, batch: BatchStats) {
        let n = self.counts[j] as f64;
        let m = batch.count as f64;
        let total = n + m;
        let first = self.counts[j] == 0;
        let delta: Vec<f64> = self.means[j].iter().zip(&batch.mean).map(|(mu, bm)| mu - bm).collect();
        let cross = n * m / (total * total);
        let a = self.dim;

        match &mut self.store {
            Store::Full(covs) => {
                let cov = covs[j].as_mut_slice();
                if first {
                    cov.copy_from_slice(&batch.second);
                } else {
                    for p in 0..a {
                        for q in 0..a {
                            let k = p * a + q;
                            cov[k] = (n * cov[k] + m * batch.second[k]) / total + cross * (delta[p] * delta[q]);
                        }
                    }
                }
            }
            Store::Diagonal(diags) => {
                let d = &mut diags[j];
                if first {
                    d.copy_from_slice(&batch.second);
                } else {
                    for p in 0..a {
                        d[p] = (n * d[p] + m * batch.second[p]) / total + cross * delta[p] * delta[p];
                    }
                }
            }
            Store::Identity => {}
            Store::Shared { count, cov } => {
                // within-class scatter of class j grows by m S' + n m/(n+m) d d^T
                let big_n = *count as f64;
                let new_n = big_n + m;
                let w = n * m / total;
                let cov = cov.as_mut_slice();
                for p in 0..a {
                    for q in 0..a {
                        let k = p * a + q;
                        cov[k] = (big_n * cov[k] + m * batch.second[k] + w * (delta[p] * delta[q])) / new_n;
                    }
                }
                *count += batch.count as u64;
            }
        }

        if first {
            self.means[j].copy_from_slice(&batch.mean);
        } else {
            for (mu, bm) in self.means[j].iter_mut().zip(&batch.mean) {
                *mu = (n * *mu + m * bm) / total;
            }
        }
        self.counts[j] += batch.count as u64;
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.num_classes {
            return domain(format!("class {class_id} out of range for {} classes", self.num_classes));
        }
        Ok(())
    }

    /// Covariance of `class_id` as the tracker's own mode serves it.
    pub fn view(&self, class_id: usize) -> Result<CovView<'_>> {
        self.check_class(class_id)?;
        Ok(self.view_unchecked(class_id))
    }

    #[inline]
    pub(crate) fn view_unchecked(&self, class_id: usize) -> CovView<'_> {
        match &self.store {
            Store::Full(c) => CovView::Full(&c[class_id]),
            Store::Diagonal(d) => CovView::Diagonal(&d[class_id]),
            Store::Identity => CovView::Identity(self.dim),
            Store::Shared { cov, .. } => CovView::Full(cov),
        }
    }

    /// Materialized covariance of `class_id` in the tracker's mode.
    pub fn covariance(&self, class_id: usize) -> Result<Mat> {
        Ok(self.view(class_id)?.to_mat())
    }

    /// Materialized covariance under another mode, when it can be derived
    /// from what this tracker stores. Full storage serves every mode;
    /// Diagonal and Shared storage serve themselves, Diagonal (of the
    /// stored matrix) and Identity.
    pub fn covariance_as(&self, class_id: usize, mode: CovMode) -> Result<Mat> {
        self.check_class(class_id)?;
        if mode == self.mode {
            return self.covariance(class_id);
        }
        match (mode, &self.store) {
            (CovMode::Identity, _) => Ok(Mat::identity(self.dim)),
            (CovMode::Diagonal, Store::Full(c)) => Ok(Mat::from_diag(&c[class_id].diag())),
            (CovMode::Diagonal, Store::Shared { cov, .. }) => Ok(Mat::from_diag(&cov.diag())),
            (CovMode::Shared, Store::Full(c)) => {
                let total: u64 = self.counts.iter().sum();
                let mut pooled = Mat::zeros(self.dim, self.dim);
                if total == 0 {
                    return Ok(pooled);
                }
                for (cj, &nj) in c.iter().zip(&self.counts) {
                    pooled.add_scaled(nj as f64 / total as f64, cj)?;
                }
                Ok(pooled)
            }
            _ => domain(format!("a {} tracker cannot serve {} covariances", self.mode, mode)),
        }
    }

    pub fn class_stats(&self, class_id: usize) -> Result<ClassStats> {
        Ok(ClassStats {
            class_id,
            count: self.counts[class_id],
            mean: self.means[class_id].clone(),
            cov: self.covariance(class_id)?,
        })
    }
}

// ---- binary snapshot ---------------------------------------------------

const MAGIC: &[u8; 4] = b"ISDA";
pub const SNAPSHOT_VERSION: u16 = 1;

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(truncated)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn truncated(e: std::io::Error) -> IsdaError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        IsdaError::Format("truncated tracker snapshot".into())
    } else {
        IsdaError::Io(e)
    }
}

impl CovarianceTracker {
    /// Writes the versioned little-endian snapshot:
    ///
    /// ```text
    /// "ISDA" | u16 version | u32 C | u32 A | u8 mode tag
    /// per class: u64 count | A x f64 mean | cov payload
    ///   full: A*A f64, diagonal: A f64, identity/shared: none
    /// shared only, after the classes: u64 pooled count | A*A f64 pooled cov
    /// ```
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.mode.tag()])?;
        for j in 0..self.num_classes {
            w.write_all(&self.counts[j].to_le_bytes())?;
            put_f64s(w, &self.means[j])?;
            match &self.store {
                Store::Full(c) => put_f64s(w, c[j].as_slice())?,
                Store::Diagonal(d) => put_f64s(w, &d[j])?,
                Store::Identity | Store::Shared { .. } => {}
            }
        }
        if let Store::Shared { count, cov } = &self.store {
            w.write_all(&count.to_le_bytes())?;
            put_f64s(w, cov.as_slice())?;
        }
        Ok(())
    }

    pub fn read_snapshot(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 4 + 2 + 4 + 4 + 1];
        r.read_exact(&mut head).map_err(truncated)?;
        if &head[..4] != MAGIC {
            return Err(IsdaError::Format("bad tracker snapshot magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != SNAPSHOT_VERSION {
            return Err(IsdaError::Format(format!("unsupported snapshot version {version}")));
        }
        let c = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
        let a = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
        let mode =
            CovMode::from_tag(head[14]).ok_or_else(|| IsdaError::Format(format!("unknown mode tag {}", head[14])))?;
        let mut t = CovarianceTracker::new(c, a, mode)?;
        for j in 0..c {
            t.counts[j] = get_u64(r)?;
            t.means[j] = get_f64s(r, a)?;
            match &mut t.store {
                Store::Full(covs) => covs[j] = Mat::from_vec(a, a, get_f64s(r, a * a)?)?,
                Store::Diagonal(d) => d[j] = get_f64s(r, a)?,
                Store::Identity | Store::Shared { .. } => {}
            }
        }
        if let Store::Shared { count, cov } = &mut t.store {
            *count = get_u64(r)?;
            *cov = Mat::from_vec(a, a, get_f64s(r, a * a)?)?;
        }
        Ok(t)
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_snapshot(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_snapshot(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(IsdaError::Format(format!("{} trailing bytes after snapshot", cursor.len())));
        }
        Ok(t)
    }
}
