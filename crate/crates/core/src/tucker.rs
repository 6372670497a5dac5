//! Truncated Tucker decomposition by higher-order orthogonal iteration (HOOI).
//!
//! A [`TuckerModel`] holds a core tensor and one orthonormal factor matrix per
//! mode. Ranks are picked per mode from the spectrum of each unfolding's Gram
//! matrix; HOOI starts from the truncated HOSVD and sweeps the modes in order,
//! so the last mode is always refreshed last. That ordering matters to the
//! emulators: after a sweep the last factor holds exact eigenvectors of the
//! projected design-mode Gram matrix, which makes `G_(d) G_(d)ᵀ` diagonal.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{canonical_column_signs, leading_left_singular_vectors, symmetric_eigen_desc};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerModel<T> {
    core: DenseTensor<T>,
    factors: Vec<DMatrix<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HooiConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for HooiConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

/// Convergence trace of one HOOI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HooiReport {
    /// Completed sweeps (0 when the HOSVD start was already exact).
    pub iterations: usize,
    /// Relative Frobenius error after initialization and after every sweep.
    pub errors: Vec<f64>,
    pub converged: bool,
}

impl<T: Real> TuckerModel<T> {
    pub fn new(core: DenseTensor<T>, factors: Vec<DMatrix<T>>) -> Result<Self> {
        if factors.len() != core.order() {
            return Err(Error::dim(format!(
                "{} factors for an order-{} core",
                factors.len(),
                core.order()
            )));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.ncols() != core.dims()[k] {
                return Err(Error::dim(format!(
                    "factor {k} has {} columns but the core rank is {}",
                    f.ncols(),
                    core.dims()[k]
                )));
            }
            if f.ncols() > f.nrows() {
                return Err(Error::dim(format!(
                    "factor {k} rank {} exceeds its dimension {}",
                    f.ncols(),
                    f.nrows()
                )));
            }
        }
        Ok(Self { core, factors })
    }

    pub fn core(&self) -> &DenseTensor<T> {
        &self.core
    }

    pub fn factors(&self) -> &[DMatrix<T>] {
        &self.factors
    }

    pub fn factor(&self, k: usize) -> &DMatrix<T> {
        &self.factors[k]
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.core.dims().to_vec()
    }

    /// Sizes of the reconstructed tensor.
    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn into_parts(self) -> (DenseTensor<T>, Vec<DMatrix<T>>) {
        (self.core, self.factors)
    }

    /// Largest `|UᵀU − I|` entry over all factors.
    pub fn orthonormality_defect(&self) -> T {
        self.factors
            .iter()
            .map(crate::linalg::orthonormality_defect)
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// `core ×_1 U_1 ×_2 … ×_d U_d`.
    pub fn reconstruct(&self) -> DenseTensor<T> {
        let mut out = self.core.clone();
        for (k, f) in self.factors.iter().enumerate() {
            out = out.mode_product(f, k).expect("factor shapes validated at construction");
        }
        out
    }

    /// Share of the core's squared norm carried by column `j` of factor `mode`.
    pub fn basis_contribution(&self, mode: usize, j: usize) -> Result<T> {
        if mode >= self.order() {
            return Err(Error::ModeIndex {
                mode,
                order: self.order(),
            });
        }
        let r = self.core.dims()[mode];
        if j >= r {
            return Err(Error::dim(format!("column {j} of a rank-{r} factor")));
        }
        let total = self.core.norm_squared();
        if total <= T::zero() {
            return Err(Error::Degenerate("core tensor is identically zero".into()));
        }
        let slab = self.core.unfold(mode)?;
        Ok(slab.row(j).norm_squared() / total)
    }

    /// Rotates the last factor so that `G_(d) G_(d)ᵀ` is diagonal with
    /// non-increasing entries, then applies the canonical column signs. The
    /// reconstruction is unchanged.
    pub fn align_last_mode(&self) -> Self {
        let last = self.order() - 1;
        let g = self.core.unfold(last).expect("valid mode");
        let (_, q) = symmetric_eigen_desc(&g * g.transpose());
        let mut u = &self.factors[last] * &q;
        let signs = canonical_column_signs(&mut u);
        let q_signed = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * signs[j]);
        let core = self
            .core
            .mode_product(&q_signed.transpose(), last)
            .expect("valid mode");
        let mut factors = self.factors.clone();
        factors[last] = u;
        Self { core, factors }
    }

    pub fn cast<U: Real>(&self) -> TuckerModel<U> {
        TuckerModel {
            core: self.core.cast(),
            factors: self
                .factors
                .iter()
                .map(|f| f.map(|v| U::lit(v.as_f64())))
                .collect(),
        }
    }
}

/// Eigenvalues (descending, negatives clamped to zero) of the mode-`k`
/// unfolding's Gram matrix. The smaller of `X Xᵀ` and `Xᵀ X` is used; both
/// share the nonzero spectrum.
pub fn mode_spectrum<T: Real>(t: &DenseTensor<T>, k: usize) -> Result<Vec<T>> {
    let x = t.unfold(k)?;
    let gram = if x.nrows() <= x.ncols() {
        &x * x.transpose()
    } else {
        x.transpose() * &x
    };
    let (vals, _) = symmetric_eigen_desc(gram);
    Ok(vals.into_iter().map(|v| v.max(T::zero())).collect())
}

/// Smallest per-mode ranks whose leading eigenvalues reach `targets[k]` of the
/// total. A single target is broadcast to every mode.
pub fn select_ranks<T: Real>(t: &DenseTensor<T>, targets: &[T]) -> Result<Vec<usize>> {
    if targets.len() != 1 && targets.len() != t.order() {
        return Err(Error::dim(format!(
            "{} variance targets for an order-{} tensor",
            targets.len(),
            t.order()
        )));
    }
    if !t.is_all_finite() {
        return Err(Error::NonFinite("tensor passed to rank selection".into()));
    }
    if t.norm_squared() <= T::zero() {
        return Err(Error::Degenerate("cannot select ranks for a zero tensor".into()));
    }
    (0..t.order())
        .map(|k| {
            let target = if targets.len() == 1 { targets[0] } else { targets[k] };
            if !(target > T::zero() && target <= T::one()) {
                return Err(Error::Domain(format!(
                    "variance target {} outside (0, 1]",
                    target.as_f64()
                )));
            }
            let spectrum = mode_spectrum(t, k)?;
            let mut cumulative = Vec::with_capacity(spectrum.len());
            let mut acc = T::zero();
            for &v in &spectrum {
                acc += v;
                cumulative.push(acc);
            }
            let total = acc;
            let needed = target * total;
            let r = cumulative
                .iter()
                .position(|&c| c >= needed)
                .map(|i| i + 1)
                .unwrap_or(spectrum.len());
            Ok(r.max(1))
        })
        .collect()
}

fn check_ranks<T: Real>(t: &DenseTensor<T>, ranks: &[usize]) -> Result<()> {
    if ranks.len() != t.order() {
        return Err(Error::dim(format!(
            "{} ranks for an order-{} tensor",
            ranks.len(),
            t.order()
        )));
    }
    for (k, (&r, &d)) in ranks.iter().zip(t.dims()).enumerate() {
        if r == 0 || r > d {
            return Err(Error::dim(format!("rank {r} invalid for mode {k} of size {d}")));
        }
    }
    if !t.is_all_finite() {
        return Err(Error::NonFinite("tensor passed to Tucker decomposition".into()));
    }
    Ok(())
}

/// `t ×_1 U_1ᵀ ×_2 … ×_d U_dᵀ`, skipping `skip` when given. Large modes are
/// contracted first to keep intermediates small.
fn project<T: Real>(t: &DenseTensor<T>, factors: &[DMatrix<T>], skip: Option<usize>) -> DenseTensor<T> {
    let mut order: Vec<usize> = (0..t.order()).filter(|&j| Some(j) != skip).collect();
    order.sort_by(|&a, &b| {
        let ra = t.dims()[a] as f64 / factors[a].ncols() as f64;
        let rb = t.dims()[b] as f64 / factors[b].ncols() as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut y = t.clone();
    for j in order {
        y = y
            .mode_product(&factors[j].transpose(), j)
            .expect("factor shapes checked");
    }
    y
}

/// Core implied by orthonormal factors: `t ×_k U_kᵀ` over every mode.
pub fn project_core<T: Real>(t: &DenseTensor<T>, factors: &[DMatrix<T>]) -> Result<DenseTensor<T>> {
    if factors.len() != t.order() {
        return Err(Error::dim("one factor per mode required"));
    }
    for (k, f) in factors.iter().enumerate() {
        if f.nrows() != t.dims()[k] {
            return Err(Error::dim(format!(
                "factor {k} has {} rows, mode size is {}",
                f.nrows(),
                t.dims()[k]
            )));
        }
    }
    Ok(project(t, factors, None))
}

fn relative_error<T: Real>(t_norm_sq: T, core: &DenseTensor<T>) -> f64 {
    if t_norm_sq <= T::zero() {
        return 0.0;
    }
    let resid = (t_norm_sq - core.norm_squared()).max(T::zero());
    (resid / t_norm_sq).sqrt().as_f64()
}

/// Truncated higher-order SVD: per-mode leading singular vectors of each unfolding.
pub fn hosvd<T: Real>(t: &DenseTensor<T>, ranks: &[usize]) -> Result<TuckerModel<T>> {
    check_ranks(t, ranks)?;
    let factors: Vec<DMatrix<T>> = (0..t.order())
        .map(|k| Ok(leading_left_singular_vectors(&t.unfold(k)?, ranks[k])))
        .collect::<Result<_>>()?;
    let core = project(t, &factors, None);
    TuckerModel::new(core, factors)
}

/// HOOI from a truncated-HOSVD start. Returns the lowest-error iterate, so the
/// error never exceeds that of the initialization.
pub fn hooi<T: Real>(
    t: &DenseTensor<T>,
    ranks: &[usize],
    cfg: HooiConfig,
) -> Result<(TuckerModel<T>, HooiReport)> {
    check_ranks(t, ranks)?;
    if cfg.max_iter == 0 {
        return Err(Error::Config("HOOI needs max_iter ≥ 1".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::Config("HOOI tolerance must be positive".into()));
    }
    let t_norm_sq = t.norm_squared();
    let mut model = hosvd(t, ranks)?;
    let mut errors = vec![relative_error(t_norm_sq, &model.core)];
    let mut best = model.clone();
    let mut best_err = errors[0];
    let mut converged = best_err <= f64::EPSILON;
    let mut iterations = 0;
    let last = t.order() - 1;

    while !converged && iterations < cfg.max_iter {
        let mut factors = model.factors.clone();
        let mut last_projection = None;
        for k in 0..t.order() {
            let y = project(t, &factors, Some(k));
            factors[k] = leading_left_singular_vectors(&y.unfold(k)?, ranks[k]);
            if k == last {
                last_projection = Some(y);
            }
        }
        let y = last_projection.expect("order ≥ 1");
        let core = y.mode_product(&factors[last].transpose(), last)?;
        model = TuckerModel::new(core, factors)?;
        iterations += 1;

        let err = relative_error(t_norm_sq, &model.core);
        let prev = *errors.last().unwrap();
        errors.push(err);
        if err <= best_err {
            best_err = err;
            best = model.clone();
        }
        let change = (prev - err).abs() / prev.max(f64::MIN_POSITIVE);
        if change < cfg.tol || err <= f64::EPSILON {
            converged = true;
        }
    }

    Ok((
        best,
        HooiReport {
            iterations,
            errors,
            converged,
        },
    ))
}

/// `1 − ‖t − recon‖² / ‖t‖²`, clamped to `[0, 1]`.
pub fn explained_variance<T: Real>(t: &DenseTensor<T>, model: &TuckerModel<T>) -> Result<T> {
    let total = t.norm_squared();
    if total <= T::zero() {
        return Err(Error::Degenerate("explained variance of a zero tensor".into()));
    }
    let recon = model.reconstruct();
    let resid = t.zip_with(&recon, |a, b| a - b)?.norm_squared();
    Ok((T::one() - resid / total).max(T::zero()).min(T::one()))
}
