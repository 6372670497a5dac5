//! Small dense linear-algebra helpers layered over `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Eigenpairs of a symmetric matrix, sorted by decreasing eigenvalue.
pub fn symmetric_eigen_desc<T: Real>(m: DMatrix<T>) -> (Vec<T>, DMatrix<T>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Gram–Schmidt (two passes) on the columns of `m`, in place.
///
/// Columns that are numerically dependent on earlier ones are replaced by the
/// first canonical basis vector that is not, so the result always has
/// orthonormal columns.
pub fn orthonormalize_columns<T: Real>(m: &mut DMatrix<T>) {
    let (rows, cols) = m.shape();
    assert!(cols <= rows, "cannot orthonormalize {cols} columns in R^{rows}");
    let tiny = T::lit(1e-10);
    let mut next_canonical = 0usize;
    for j in 0..cols {
        let original = m.column(j).norm();
        for _ in 0..2 {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let ci = m.column(i).clone_owned();
                m.column_mut(j).axpy(-proj, &ci, T::one());
            }
        }
        let mut norm = m.column(j).norm();
        while norm <= tiny * original.max(T::one()) || !norm.is_finite() {
            // degenerate column: try canonical directions until one survives projection
            let mut e = DVector::zeros(rows);
            e[next_canonical % rows] = T::one();
            next_canonical += 1;
            m.set_column(j, &e);
            for _ in 0..2 {
                for i in 0..j {
                    let proj = m.column(i).dot(&m.column(j));
                    let ci = m.column(i).clone_owned();
                    m.column_mut(j).axpy(-proj, &ci, T::one());
                }
            }
            norm = m.column(j).norm();
            if next_canonical > 2 * rows + cols {
                break;
            }
        }
        m.column_mut(j).scale_mut(T::one() / norm);
    }
}

/// Flips column signs so each column's entry sum is non-negative (falling back
/// to the largest-magnitude entry when the sum vanishes). Returns the signs applied.
pub fn canonical_column_signs<T: Real>(m: &mut DMatrix<T>) -> Vec<T> {
    let mut signs = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let col = m.column(j);
        let sum: T = col.iter().copied().sum();
        let scale = col.iter().fold(T::zero(), |a, &v| a + v.abs());
        let s = if sum.abs() > T::lit(1e-8) * scale {
            sum
        } else {
            col.iter()
                .copied()
                .fold(T::zero(), |best, v| if v.abs() > best.abs() { v } else { best })
        };
        let sign = if s < T::zero() { -T::one() } else { T::one() };
        if sign < T::zero() {
            m.column_mut(j).neg_mut();
        }
        signs.push(sign);
    }
    signs
}

/// The `r` leading left singular vectors of `m`, as orthonormal columns.
///
/// Short-and-fat inputs go through the eigendecomposition of `m mᵀ`; tall
/// inputs through `mᵀ m`, mapping the right singular vectors back by `m v / σ`.
pub fn leading_left_singular_vectors<T: Real>(m: &DMatrix<T>, r: usize) -> DMatrix<T> {
    let (rows, cols) = m.shape();
    assert!(r >= 1 && r <= rows, "rank {r} invalid for {rows} rows");
    let mut u = if rows <= cols {
        let gram = m * m.transpose();
        let (_, vecs) = symmetric_eigen_desc(gram);
        vecs.columns(0, r).clone_owned()
    } else {
        let gram = m.transpose() * m;
        let (vals, vecs) = symmetric_eigen_desc(gram);
        let top = vals.first().copied().unwrap_or(T::zero()).max(T::zero());
        let mut u = DMatrix::zeros(rows, r);
        for j in 0..r.min(cols) {
            let s2 = vals[j];
            if s2 > top * T::lit(1e-24) && s2 > T::zero() {
                let col = m * vecs.column(j) / s2.sqrt();
                u.set_column(j, &col);
            }
        }
        u
    };
    orthonormalize_columns(&mut u);
    u
}

/// `max |UᵀU − I|`.
pub fn orthonormality_defect<T: Real>(u: &DMatrix<T>) -> T {
    let g = u.transpose() * u;
    let mut worst = T::zero();
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Kronecker product `a ⊗ b`.
pub fn kron<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// Mean of the diagonal, used to scale jitter.
pub fn mean_diagonal<T: Real>(m: &DMatrix<T>) -> T {
    let n = m.nrows().max(1);
    m.diagonal().iter().copied().sum::<T>() / T::lit(n as f64)
}

/// Cholesky factorization; on failure adds `10 × jitter` to the diagonal once
/// more before giving up.
pub fn cholesky_escalating<T: Real>(m: &DMatrix<T>, jitter: T) -> Result<Cholesky<T, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let mut bumped = m.clone();
    let extra = jitter * T::lit(10.0);
    for i in 0..bumped.nrows() {
        bumped[(i, i)] += extra;
    }
    Cholesky::new(bumped).ok_or_else(|| {
        Error::Factorization(format!(
            "{}×{} matrix is not positive definite even after a jitter of {}",
            m.nrows(),
            m.ncols(),
            extra.as_f64()
        ))
    })
}

/// `log det` from a Cholesky factor.
pub fn chol_logdet<T: Real>(c: &Cholesky<T, Dyn>) -> T {
    let l = c.l_dirty();
    let mut s = T::zero();
    for i in 0..l.nrows() {
        s += l[(i, i)].ln();
    }
    s + s
}

/// Inverse of a symmetric positive definite matrix, with the jitter escalation
/// of [`cholesky_escalating`].
pub fn spd_inverse<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let jitter = T::lit(1e-8) * mean_diagonal(m).abs().max(T::lit(1e-300));
    let c = cholesky_escalating(m, jitter)?;
    let inv = c.inverse();
    Ok((&inv + inv.transpose()) * T::lit(0.5))
}
