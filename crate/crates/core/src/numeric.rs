//! Dense linear-algebra kernel shared by the rest of the crate.
//!
//! Vectors are plain `[f64]` slices; matrices are row-major [`Mat`] values
//! whose shape is checked on every binary operation. Only what the
//! covariance tracker, the losses and the small trainer need is here.

use std::ops::{Index, IndexMut};

use crate::error::{domain, shape, IsdaError, Result};
use crate::rng::Rng;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape(format!("{} elements for a {rows}x{cols} matrix", data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return domain(format!("non-finite entry at flat index {i}"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape("ragged rows");
        }
        Mat::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Mat::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an A=0 matrix never reaches here
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return shape(format!("matmul {:?} x {:?}", self.shape(), rhs.shape()));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, rhs.row(k), orow);
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`, the natural product for row-major weight matrices.
    pub fn matmul_t(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.cols {
            return shape(format!("matmul_t {:?} x {:?}^T", self.shape(), rhs.shape()));
        }
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return shape(format!("matvec {:?} x {}", self.shape(), v.len()));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return shape(format!("add {:?} + {:?}", self.shape(), other.shape()));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Symmetric to `rel_tol * ||S||_inf` in max-norm.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let tol = rel_tol * self.max_abs();
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Frobenius distance `||self - other||_F`.
    pub fn frobenius_dist(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// `L * L^T`.
    pub fn gram(&self) -> Mat {
        self.matmul_t(self).expect("square product of a matrix with itself")
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable `log(sum(exp(z)))`.
pub fn logsumexp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return domain("logsumexp of an empty vector");
    }
    if z.iter().any(|v| !v.is_finite()) {
        return domain("logsumexp of a non-finite vector");
    }
    Ok(lse(z))
}

/// Unchecked kernel behind [`logsumexp`]; callers guarantee a non-empty input.
#[inline]
pub(crate) fn lse(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Writes `softmax(z)` into `out` and returns `logsumexp(z)`.
#[inline]
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    max + sum.ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    out
}

/// Default jitter for a covariance estimate: `1e-8 * trace(S) / A`.
pub fn default_jitter(s: &Mat) -> f64 {
    1e-8 * s.trace().max(0.0) / s.rows().max(1) as f64
}

const MAX_ESCALATIONS: usize = 4;

/// Pivots below this fraction of the largest diagonal count as zero.
const PIVOT_RTOL: f64 = 1e-10;

/// Lower-triangular factor plus the jitter that was actually applied.
#[derive(Clone, Debug)]
pub struct PsdFactor {
    pub lower: Mat,
    pub jitter: f64,
}

/// Cholesky factor `L` with `L L^T ~= S + jitter * I`.
///
/// If a pivot fails the jitter is escalated by x10, starting from
/// `max(jitter, 1e-8 * trace/A)`, at most four times (ending at
/// `1e-4 * trace/A`); past that the matrix is reported as indefinite.
pub fn psd_factor(s: &Mat, jitter: f64) -> Result<Mat> {
    psd_factor_detailed(s, jitter).map(|f| f.lower)
}

pub fn psd_factor_detailed(s: &Mat, jitter: f64) -> Result<PsdFactor> {
    if s.rows() != s.cols() {
        return shape(format!("psd_factor of non-square {:?}", s.shape()));
    }
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return domain(format!("jitter must be finite and >= 0, got {jitter}"));
    }
    if !s.is_finite() {
        return domain("psd_factor of a non-finite matrix");
    }
    if !s.is_symmetric(1e-9) {
        return domain("psd_factor of an asymmetric matrix");
    }
    if let Some(lower) = cholesky(s, jitter) {
        return Ok(PsdFactor { lower, jitter });
    }
    // an all-zero matrix has no trace scale; fall back to unit scale
    let scale = if s.trace() > 0.0 { s.trace() / s.rows() as f64 } else { 1.0 };
    let mut j = jitter.max(1e-8 * scale);
    if j == jitter {
        j *= 10.0;
    }
    for _ in 0..=MAX_ESCALATIONS {
        if let Some(lower) = cholesky(s, j) {
            return Ok(PsdFactor { lower, jitter: j });
        }
        if j >= 1e-4 * scale {
            break;
        }
        j = (j * 10.0).min(1e-4 * scale);
    }
    Err(IsdaError::Indefinite { jitter: j })
}

fn cholesky(s: &Mat, jitter: f64) -> Option<Mat> {
    let n = s.rows();
    // pivots near rounding level are zero in disguise; accepting them would
    // divide noise by noise and make singular inputs factor by luck. The
    // cutoff sits well above accumulated rounding yet below the default jitter.
    let max_diag = (0..n).map(|i| s[(i, i)] + jitter).fold(0.0, f64::max);
    let tol = PIVOT_RTOL * max_diag;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)] + jitter;
        d -= l.row(j)[..j].iter().map(|v| v * v).sum::<f64>();
        if !(d > tol) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let acc = s[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = acc / d;
        }
    }
    Some(l)
}

/// Draws `mean + L * eps` with `eps ~ N(0, I)`.
pub fn sample_gaussian(mean: &[f64], lower: &Mat, rng: &mut Rng) -> Result<Vec<f64>> {
    let a = mean.len();
    if lower.shape() != (a, a) {
        return shape(format!("factor {:?} for mean of length {a}", lower.shape()));
    }
    let mut eps = vec![0.0; a];
    let mut out = vec![0.0; a];
    sample_gaussian_into(mean, lower, rng, &mut eps, &mut out);
    Ok(out)
}

/// Allocation-free kernel of [`sample_gaussian`]; shapes are the caller's
/// responsibility.
#[inline]
pub(crate) fn sample_gaussian_into(mean: &[f64], lower: &Mat, rng: &mut Rng, eps: &mut [f64], out: &mut [f64]) {
    eps.iter_mut().for_each(|e| *e = rng.normal());
    for (i, o) in out.iter_mut().enumerate() {
        *o = mean[i] + dot(&lower.row(i)[..=i], &eps[..=i]);
    }
}
