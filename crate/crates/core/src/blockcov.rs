//! Gaussian densities and solves for arrowhead-structured covariances.
//!
//! The reduced likelihoods produce covariances of the form
//!
//! ```text
//! S = [ S_aa   S_ah ]      S_aa = blockdiag(S_1, …, S_J)
//!     [ S_ha   S_hh ]
//! ```
//!
//! where the `a` blocks are large and independent and the `h` part is small.
//! Each `a` block is factored on its own; the `h` part enters through the
//! Schur complement `S_hh − Σ_j S_hjᵀ S_j⁻¹ S_hj`. Blocks can be refreshed one
//! at a time, which is what the componentwise sampler needs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::gp::JITTER;
use crate::linalg::{chol_logdet, cholesky_escalating, mean_diagonal};
use crate::scalar::Real;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn factor<T: Real>(m: &DMatrix<T>) -> Result<Cholesky<T, Dyn>> {
    let jitter = T::lit(JITTER) * mean_diagonal(m).abs().max(T::lit(1e-300));
    cholesky_escalating(m, jitter)
}

fn lower_solve<T: Real>(c: &Cholesky<T, Dyn>, b: &DMatrix<T>) -> DMatrix<T> {
    c.l_dirty()
        .solve_lower_triangular(b)
        .expect("Cholesky factors have a positive diagonal")
}

/// One factored diagonal block together with its coupling to the `h` part.
#[derive(Debug, Clone)]
pub struct ArmFactor<T: Real> {
    chol: Cholesky<T, Dyn>,
    /// `L⁻¹ S_ah` restricted to this block's rows (`n_j × n_h`).
    w: DMatrix<T>,
    /// `L⁻¹ y_j`
    alpha: DVector<T>,
    logdet: T,
}

impl<T: Real> ArmFactor<T> {
    /// `coupling` is `S_ah` restricted to this block's rows, or `None` when
    /// there is no `h` part.
    pub fn new(block: &DMatrix<T>, coupling: Option<&DMatrix<T>>, y: &DVector<T>) -> Result<Self> {
        if !block.is_square() || block.nrows() != y.len() {
            return Err(Error::dim("block and data sizes differ"));
        }
        let chol = factor(block)?;
        let w = match coupling {
            Some(c) => {
                if c.nrows() != block.nrows() {
                    return Err(Error::dim("coupling rows differ from block size"));
                }
                lower_solve(&chol, c)
            }
            None => DMatrix::zeros(block.nrows(), 0),
        };
        let alpha = chol
            .l_dirty()
            .solve_lower_triangular(y)
            .expect("Cholesky factors have a positive diagonal");
        let logdet = chol_logdet(&chol);
        Ok(Self { chol, w, alpha, logdet })
    }

    pub fn size(&self) -> usize {
        self.alpha.len()
    }

    pub fn logdet(&self) -> T {
        self.logdet
    }

    pub fn quad(&self) -> T {
        self.alpha.norm_squared()
    }
}

/// Factored Schur complement of the `h` part.
#[derive(Debug, Clone)]
pub struct HubFactor<T: Real> {
    chol: Cholesky<T, Dyn>,
    /// `L_s⁻¹ (y_h − Σ_j W_jᵀ α_j)`
    alpha: DVector<T>,
    logdet: T,
}

impl<T: Real> HubFactor<T> {
    pub fn new(arms: &[ArmFactor<T>], s_hh: &DMatrix<T>, y_h: &DVector<T>) -> Result<Self> {
        let mut s = s_hh.clone();
        let mut r = y_h.clone();
        for a in arms {
            if a.w.ncols() != s.nrows() {
                return Err(Error::dim("arm coupling width differs from hub size"));
            }
            s -= a.w.transpose() * &a.w;
            r -= a.w.transpose() * &a.alpha;
        }
        let s = (&s + s.transpose()) * T::lit(0.5);
        let chol = factor(&s)?;
        let alpha = chol
            .l_dirty()
            .solve_lower_triangular(&r)
            .expect("Cholesky factors have a positive diagonal");
        let logdet = chol_logdet(&chol);
        Ok(Self { chol, alpha, logdet })
    }

    pub fn logdet(&self) -> T {
        self.logdet
    }

    pub fn quad(&self) -> T {
        self.alpha.norm_squared()
    }
}

/// `log N(y; 0, S)` from the factored pieces.
pub fn log_density<T: Real>(arms: &[ArmFactor<T>], hub: Option<&HubFactor<T>>) -> T {
    let mut n = 0usize;
    let mut acc = T::zero();
    for a in arms {
        n += a.size();
        acc += a.logdet + a.quad();
    }
    if let Some(h) = hub {
        n += h.alpha.len();
        acc += h.logdet + h.quad();
    }
    -(T::lit(n as f64 * LN_2PI) + acc) * T::lit(0.5)
}

/// Solves `S x = v` for several right-hand sides at once. `v_arms[j]` holds
/// the rows of block `j` (`n_j × k`), `v_hub` the `h` rows (`n_h × k`).
pub fn solve<T: Real>(
    arms: &[ArmFactor<T>],
    hub: Option<&HubFactor<T>>,
    v_arms: &[DMatrix<T>],
    v_hub: Option<&DMatrix<T>>,
) -> Result<(Vec<DMatrix<T>>, Option<DMatrix<T>>)> {
    if v_arms.len() != arms.len() {
        return Err(Error::dim("one right-hand-side block per arm required"));
    }
    let alphas: Vec<DMatrix<T>> = arms.iter().zip(v_arms).map(|(a, v)| lower_solve(&a.chol, v)).collect();
    let x_hub = match (hub, v_hub) {
        (Some(h), Some(vh)) => {
            let mut r = vh.clone();
            for (a, al) in arms.iter().zip(&alphas) {
                r -= a.w.transpose() * al;
            }
            Some(h.chol.solve(&r))
        }
        (None, None) => None,
        _ => return Err(Error::dim("hub right-hand side given without hub (or vice versa)")),
    };
    let x_arms = arms
        .iter()
        .zip(alphas)
        .map(|(a, mut al)| {
            if let Some(xh) = &x_hub {
                al -= &a.w * xh;
            }
            a.chol
                .l_dirty()
                .transpose()
                .solve_upper_triangular(&al)
                .expect("Cholesky factors have a positive diagonal")
        })
        .collect();
    Ok((x_arms, x_hub))
}
