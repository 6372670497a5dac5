//! Anisotropic exponential-kernel Gaussian processes.
//!
//! `k(x, x') = precision⁻¹ · exp(−Σ_d |x_d − x'_d| / ℓ_d)`. All processes have
//! zero prior mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_escalating, symmetric_eigen_desc};
use crate::scalar::Real;

/// Relative diagonal jitter added to square covariance matrices.
pub const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams<T> {
    pub precision: T,
    pub length_scales: Vec<T>,
}

impl<T: Real> GpHyperparams<T> {
    pub fn new(precision: T, length_scales: Vec<T>) -> Result<Self> {
        let h = Self {
            precision,
            length_scales,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.precision > T::zero()) || !self.precision.is_finite() {
            return Err(Error::Domain(format!(
                "GP precision must be positive, got {}",
                self.precision.as_f64()
            )));
        }
        if let Some(l) = self.length_scales.iter().find(|l| !(**l > T::zero())) {
            return Err(Error::Domain(format!(
                "length scales must be positive, got {}",
                l.as_f64()
            )));
        }
        Ok(())
    }

    pub fn variance(&self) -> T {
        T::one() / self.precision
    }
}

/// Design points stored row by row; one row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix<T> {
    n: usize,
    p: usize,
    values: Vec<T>,
}

impl<T: Real> DesignMatrix<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::dim("a design needs at least one point"));
        }
        let p = rows[0].len();
        if p == 0 {
            return Err(Error::dim("design points need at least one coordinate"));
        }
        let mut values = Vec::with_capacity(n * p);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != p {
                return Err(Error::dim(format!("design row {i} has {} entries, expected {p}", r.len())));
            }
            values.extend(r);
        }
        Self::from_flat(n, p, values)
    }

    /// Row-major flat values.
    pub fn from_flat(n: usize, p: usize, values: Vec<T>) -> Result<Self> {
        if n == 0 || p == 0 || values.len() != n * p {
            return Err(Error::dim(format!("{} values cannot form a {n}×{p} design", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design entries".into()));
        }
        Ok(Self { n, p, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks(self.p)
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            if i >= self.n {
                return Err(Error::dim(format!("design row {i} out of range ({} rows)", self.n)));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::from_flat(idx.len(), self.p, values)
    }

    /// All rows except `skip`.
    pub fn without(&self, skip: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..self.n).filter(|&i| i != skip).collect();
        self.select(&keep)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.p != self.p {
            return Err(Error::dim("designs differ in input dimension"));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::from_flat(self.n + other.n, self.p, values)
    }

    pub fn single(point: &[T]) -> Result<Self> {
        Self::from_flat(1, point.len(), point.to_vec())
    }
}

pub fn kernel<T: Real>(x: &[T], y: &[T], h: &GpHyperparams<T>) -> Result<T> {
    if x.len() != y.len() || x.len() != h.length_scales.len() {
        return Err(Error::dim(format!(
            "kernel inputs of lengths {} and {} with {} length scales",
            x.len(),
            y.len(),
            h.length_scales.len()
        )));
    }
    Ok(kernel_unchecked(x, y, h))
}

#[inline]
fn kernel_unchecked<T: Real>(x: &[T], y: &[T], h: &GpHyperparams<T>) -> T {
    let mut d = T::zero();
    for ((a, b), l) in x.iter().zip(y).zip(&h.length_scales) {
        d += (*a - *b).abs() / *l;
    }
    (-d).exp() / h.precision
}

/// Cross-covariance between two designs; adds the relative jitter to the
/// diagonal when `a` and `b` are the same design.
pub fn cov_matrix<T: Real>(a: &DesignMatrix<T>, b: &DesignMatrix<T>, h: &GpHyperparams<T>) -> Result<DMatrix<T>> {
    if a.p != b.p || a.p != h.length_scales.len() {
        return Err(Error::dim(format!(
            "designs of dimension {} and {} with {} length scales",
            a.p,
            b.p,
            h.length_scales.len()
        )));
    }
    if a == b {
        return Ok(cov_symmetric(a, h));
    }
    Ok(DMatrix::from_fn(a.n, b.n, |i, j| kernel_unchecked(a.row(i), b.row(j), h)))
}

/// `K(A, A) + jitter · I`, filled symmetrically.
pub fn cov_symmetric<T: Real>(a: &DesignMatrix<T>, h: &GpHyperparams<T>) -> DMatrix<T> {
    let n = a.n;
    let mut k = DMatrix::zeros(n, n);
    let diag = h.variance() * (T::one() + T::lit(JITTER));
    for i in 0..n {
        k[(i, i)] = diag;
        for j in 0..i {
            let v = kernel_unchecked(a.row(i), a.row(j), h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub fn block_diag<T: Real>(blocks: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    for (i, b) in blocks.iter().enumerate() {
        if !b.is_square() {
            return Err(Error::dim(format!("block {i} is {}×{}", b.nrows(), b.ncols())));
        }
    }
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), b.shape()).copy_from(b);
        off += b.nrows();
    }
    Ok(out)
}

fn jitter_for<T: Real>(cov: &DMatrix<T>) -> T {
    T::lit(JITTER) * crate::linalg::mean_diagonal(cov).abs().max(T::lit(1e-300))
}

/// Log density of `N(mean, cov)` at `y`.
pub fn mvn_logpdf<T: Real>(y: &DVector<T>, mean: &DVector<T>, cov: &DMatrix<T>) -> Result<T> {
    let n = y.len();
    if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(Error::dim(format!(
            "y has {n} entries, mean {}, covariance {}×{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cholesky_escalating(cov, jitter_for(cov))?;
    let r = y - mean;
    let alpha = chol.l_dirty().solve_lower_triangular(&r).ok_or_else(|| {
        Error::Factorization("triangular solve failed".into())
    })?;
    let quad = alpha.norm_squared();
    let two_pi = T::lit(std::f64::consts::TAU);
    Ok(-(T::lit(n as f64) * two_pi.ln() + chol_logdet(&chol) + quad) * T::lit(0.5))
}

/// Conditional mean and covariance of the unobserved block given `observed`,
/// for a zero-mean joint Gaussian.
pub fn mvn_condition<T: Real>(
    sigma_oo: &DMatrix<T>,
    sigma_op: &DMatrix<T>,
    sigma_pp: &DMatrix<T>,
    observed: &DVector<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let (no, np) = sigma_op.shape();
    if sigma_oo.shape() != (no, no) || sigma_pp.shape() != (np, np) || observed.len() != no {
        return Err(Error::dim("inconsistent partition shapes in conditioning"));
    }
    let chol = cholesky_escalating(sigma_oo, jitter_for(sigma_oo))?;
    let mean = sigma_op.transpose() * chol.solve(observed);
    let l = chol.l_dirty();
    let w = l
        .solve_lower_triangular(sigma_op)
        .ok_or_else(|| Error::Factorization("triangular solve failed".into()))?;
    let cov = sigma_pp - w.transpose() * &w;
    Ok((mean, psd_project(cov)?))
}

/// Symmetrizes `m` and clamps small negative eigenvalues (≥ −1e-10 relative
/// to the largest magnitude) to zero.
pub fn psd_project<T: Real>(m: DMatrix<T>) -> Result<DMatrix<T>> {
    let sym = (&m + m.transpose()) * T::lit(0.5);
    let n = sym.nrows();
    if n == 0 {
        return Ok(sym);
    }
    let (vals, vecs) = symmetric_eigen_desc(sym.clone());
    let scale = vals.iter().fold(T::one(), |a, v| a.max(v.abs()));
    let floor = -T::lit(1e-10) * scale;
    if vals.iter().all(|&v| v >= T::zero()) {
        return Ok(sym);
    }
    if let Some(bad) = vals.iter().find(|&&v| v < floor) {
        return Err(Error::Factorization(format!(
            "conditional covariance has eigenvalue {}",
            bad.as_f64()
        )));
    }
    let clamped = DMatrix::from_diagonal(&DVector::from_iterator(n, vals.iter().map(|v| v.max(T::zero()))));
    let out = &vecs * clamped * vecs.transpose();
    Ok((&out + out.transpose()) * T::lit(0.5))
}
