//! Multi-fidelity tensor emulator.
//!
//! The LF spatial basis is carried to the HF mesh by k-nearest-neighbour
//! averaging (`Ũ_s`), the HF runs are explained by the interpolated LF fields
//! plus an additive discrepancy with its own Tucker basis, and LF and HF data
//! are fitted jointly.
//!
//! For the HF data `z^HF = K [γ^HF; ζ] + ε_δ` with `K = [B̃ T̃, D T′]`. As in the
//! single-fidelity case `KᵀK = M ⊗ I_{n_x^HF}` for a small matrix `M` over the
//! `r_x + r′_x` HF weights, and the likelihood reduces to one for
//! `θ̃^HF = (KᵀK)⁻¹ Kᵀ z^HF` plus a Gamma update of `λ_δ`.
//!
//! The joint covariance of `[γ̂^LF; θ̃^HF]` is arrowhead shaped: one block per
//! LF weight (LF design points) and a shared block for all HF weights, coupled
//! only through the cross-covariance of each γ GP between the two designs.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockcov::{self, ArmFactor, HubFactor};
use crate::error::{Error, Result};
use crate::gp::{cov_matrix, cov_symmetric, DesignMatrix, GpHyperparams};
use crate::linalg::{cholesky_escalating, spd_inverse};
use crate::mcmc::{run_chains, LogTarget, McmcConfig, PosteriorSamples, Prior};
use crate::predict::{DrawSource, PredictionResult};
use crate::scalar::Real;
use crate::sf::{
    explained_quadratic, field_basis, field_basis_with, initial_point, noise_seed, projected_weights_with, GpBank,
    PriorConfig, SfEmulator, SfOptions,
};
use crate::tensor::DenseTensor;
use crate::transform::TransformSpec;
use crate::tucker::{hooi, HooiConfig, TuckerModel};

/// Spatial coordinates of one mesh, one point per row of the spatial mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshCoords<T> {
    points: Vec<Vec<T>>,
}

impl<T: Real> MeshCoords<T> {
    pub fn new(points: Vec<Vec<T>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::dim("mesh has no points"));
        };
        let d = first.len();
        if !(2..=3).contains(&d) || points.iter().any(|p| p.len() != d) {
            return Err(Error::dim("mesh points must all be 2-D or all 3-D"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh coordinates".into()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            points[a]
                .iter()
                .zip(&points[b])
                .map(|(x, y)| x.partial_cmp(y).expect("finite"))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let tol = T::lit(1e-12);
        for w in order.windows(2) {
            let (a, b) = (&points[w[0]], &points[w[1]]);
            if a.iter().zip(b).all(|(x, y)| (*x - *y).abs() <= tol) {
                return Err(Error::Domain(format!("duplicate mesh points {} and {}", w[0], w[1])));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }
}

/// Each HF row is the plain mean of the rows at its `k` nearest LF points;
/// distance ties go to the lower LF index.
pub fn interpolate_bases<T: Real>(
    lf_factor: &DMatrix<T>,
    lf_mesh: &MeshCoords<T>,
    hf_mesh: &MeshCoords<T>,
    k: usize,
) -> Result<DMatrix<T>> {
    if lf_factor.nrows() != lf_mesh.len() {
        return Err(Error::dim(format!(
            "factor has {} rows for {} LF mesh points",
            lf_factor.nrows(),
            lf_mesh.len()
        )));
    }
    if lf_mesh.dim() != hf_mesh.dim() {
        return Err(Error::dim("LF and HF meshes differ in dimension"));
    }
    if k == 0 || k > lf_mesh.len() {
        return Err(Error::Domain(format!("k = {k} outside 1..={}", lf_mesh.len())));
    }
    let rows: Vec<Vec<usize>> = hf_mesh
        .points()
        .par_iter()
        .map(|p| {
            let mut d: Vec<(T, usize)> = lf_mesh
                .points()
                .iter()
                .enumerate()
                .map(|(i, q)| (p.iter().zip(q).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>(), i))
                .collect();
            let cmp = |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
            }
            d[..k].iter().map(|x| x.1).collect()
        })
        .collect();
    let inv_k = T::one() / T::lit(k as f64);
    let mut out = DMatrix::zeros(hf_mesh.len(), lf_factor.ncols());
    for (h, nn) in rows.iter().enumerate() {
        for &i in nn {
            for c in 0..lf_factor.ncols() {
                out[(h, c)] += lf_factor[(i, c)];
            }
        }
        for c in 0..lf_factor.ncols() {
            out[(h, c)] *= inv_k;
        }
    }
    Ok(out)
}

/// LF effective weights at the HF design: exact row restriction for design
/// points shared with the LF design, elsewhere the GP conditional mean at
/// posterior-mean hyperparameters with `γ̂^LF` taken as noise-free.
pub fn hf_effective_weights<T: Real>(lf: &SfEmulator<T>, x_hf: &DesignMatrix<T>) -> Result<DMatrix<T>> {
    if x_hf.p() != lf.design.p() {
        return Err(Error::dim("HF design differs in dimension from the LF design"));
    }
    let r = lf.n_weights();
    let mut out = DMatrix::zeros(x_hf.n(), r);
    let mut missing = Vec::new();
    for (t, x) in x_hf.rows().enumerate() {
        match lf.design.rows().position(|y| y == x) {
            Some(i) => out.set_row(t, &lf.gamma_hat.row(i)),
            None => missing.push(t),
        }
    }
    if !missing.is_empty() {
        let pts = x_hf.select(&missing)?;
        let (mean, _) = lf.weight_interpolant(&lf.mean_draw(), &pts)?;
        for (k, &t) in missing.iter().enumerate() {
            out.set_row(t, &mean.row(k));
        }
    }
    Ok(out)
}

/// Fixed ingredients of the HF reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct MfParts<T: Real> {
    /// LF core `G`.
    pub core: DenseTensor<T>,
    /// Interpolated spatial factor `Ũ_s` (`n_s^HF × r_s`).
    pub us_tilde: DMatrix<T>,
    pub um: DMatrix<T>,
    pub uy: DMatrix<T>,
    /// Design-aligned discrepancy Tucker model.
    pub disc: TuckerModel<T>,
}

impl<T: Real> MfParts<T> {
    pub fn r_lf(&self) -> usize {
        self.core.dims()[3]
    }

    pub fn r_disc(&self) -> usize {
        self.disc.ranks()[3]
    }

    /// Interpolated LF field basis `(U_y ⊗ U_m ⊗ Ũ_s) G_(4)ᵀ`.
    pub fn lf_field_basis(&self) -> Result<DMatrix<T>> {
        field_basis_with(&self.core, &self.us_tilde, &self.um, &self.uy)
    }

    /// `[B̃ G_(4)ᵀ, D G′_(4)ᵀ]` (`n^HF × (r_x + r′_x)`).
    pub fn hf_field_basis(&self) -> Result<DMatrix<T>> {
        let a = self.lf_field_basis()?;
        let b = field_basis(&self.disc)?;
        let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
        out.columns_mut(0, a.ncols()).copy_from(&a);
        out.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
        Ok(out)
    }
}

/// `η̃^LF` at the HF design from interpolated bases, subtracted from the HF
/// runs.
pub fn discrepancy_ensemble<T: Real>(
    z_hf: &DenseTensor<T>,
    core: &DenseTensor<T>,
    us_tilde: &DMatrix<T>,
    um: &DMatrix<T>,
    uy: &DMatrix<T>,
    gamma_hf: &DMatrix<T>,
) -> Result<DenseTensor<T>> {
    let d = z_hf.dims();
    if z_hf.order() != 4
        || d[0] != us_tilde.nrows()
        || d[1] != um.nrows()
        || d[2] != uy.nrows()
        || d[3] != gamma_hf.nrows()
        || gamma_hf.ncols() != core.dims()[3]
    {
        return Err(Error::dim(format!(
            "HF ensemble dims {:?} inconsistent with interpolated LF components",
            d
        )));
    }
    let h = field_basis_with(core, us_tilde, um, uy)?;
    let lf_part = &h * gamma_hf.transpose();
    let vals: Vec<T> = z_hf.values().iter().zip(lf_part.as_slice()).map(|(z, l)| *z - *l).collect();
    DenseTensor::new(d.to_vec(), vals)
}

/// The `(r_x + r′_x)` square matrix `M` with `KᵀK = M ⊗ I_{n_x^HF}`.
pub fn mf_core_gram<T: Real>(parts: &MfParts<T>) -> Result<DMatrix<T>> {
    let r = parts.r_lf();
    let rp = parts.r_disc();
    let g4 = parts.core.unfold(3)?;
    let f = parts.disc.factors();
    let gp4 = parts.disc.core().unfold(3)?;
    let s_tilde = parts.us_tilde.transpose() * &parts.us_tilde;
    let m11 = parts.core.mode_product(&s_tilde, 0)?.unfold(3)? * g4.transpose();
    let xs = parts.us_tilde.transpose() * &f[0];
    let xm = parts.um.transpose() * &f[1];
    let xy = parts.uy.transpose() * &f[2];
    let cross = parts
        .core
        .mode_product(&xs.transpose(), 0)?
        .mode_product(&xm.transpose(), 1)?
        .mode_product(&xy.transpose(), 2)?;
    let m12 = cross.unfold(3)? * gp4.transpose();
    let m22 = &gp4 * gp4.transpose();
    let mut m = DMatrix::zeros(r + rp, r + rp);
    m.view_mut((0, 0), (r, r)).copy_from(&m11);
    m.view_mut((0, r), (r, rp)).copy_from(&m12);
    m.view_mut((r, 0), (rp, r)).copy_from(&m12.transpose());
    m.view_mut((r, r), (rp, rp)).copy_from(&m22);
    Ok((&m + m.transpose()) * T::lit(0.5))
}

/// `KᵀK` (weight-major ordering), built from per-mode Gram matrices.
pub fn mf_reduced_gram<T: Real>(parts: &MfParts<T>, n_hf: usize) -> Result<DMatrix<T>> {
    if parts.disc.orthonormality_defect() > T::lit(1e-8) {
        return Err(Error::Contract("discrepancy factors are not orthonormal".into()));
    }
    Ok(mf_core_gram(parts)?.kronecker(&DMatrix::identity(n_hf, n_hf)))
}

/// `Kᵀ z^HF` as an `n_x^HF × (r_x + r′_x)` matrix.
pub fn mf_project_data<T: Real>(z_hf: &DenseTensor<T>, parts: &MfParts<T>) -> Result<DMatrix<T>> {
    let a = projected_weights_with(z_hf, &parts.us_tilde, &parts.um, &parts.uy, &parts.core)?;
    let f = parts.disc.factors();
    let b = projected_weights_with(z_hf, &f[0], &f[1], &f[2], parts.disc.core())?;
    let mut q = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    q.columns_mut(0, a.ncols()).copy_from(&a);
    q.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfOptions {
    pub mcmc: McmcConfig,
    pub priors: PriorConfig,
    /// Neighbours averaged when carrying LF bases to the HF mesh.
    pub k_interp: usize,
    pub hooi: HooiConfig,
}

impl Default for MfOptions {
    fn default() -> Self {
        Self {
            mcmc: McmcConfig::default(),
            priors: PriorConfig::default(),
            k_interp: 3,
            hooi: HooiConfig::default(),
        }
    }
}

impl MfOptions {
    pub fn sf(&self) -> SfOptions {
        SfOptions {
            mcmc: self.mcmc.clone(),
            priors: self.priors.clone(),
            fixed_noise_precision: None,
        }
    }
}

/// Fixed hyperparameters of one joint posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct MfDraw<T> {
    pub gamma: Vec<GpHyperparams<T>>,
    pub zeta: Vec<GpHyperparams<T>>,
    pub lambda_eta: T,
    pub lambda_delta: T,
}

/// Observed statistics of the joint reduced model and their designs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MfSystem<'a, T: Real> {
    pub x_lf: &'a DesignMatrix<T>,
    pub x_hf: &'a DesignMatrix<T>,
    /// `n_x^LF × r_x`
    pub gamma_lf: &'a DMatrix<T>,
    pub lf_diag: &'a [T],
    /// `n_x^HF × (r_x + r′_x)`
    pub theta_hf: &'a DMatrix<T>,
    pub m_inv: &'a DMatrix<T>,
}

impl<T: Real> MfSystem<'_, T> {
    fn r(&self) -> usize {
        self.gamma_lf.ncols()
    }

    fn q(&self) -> usize {
        self.theta_hf.ncols()
    }

    fn hub_size(&self) -> usize {
        self.q() * self.x_hf.n()
    }

    fn arm(&self, j: usize, d: &MfDraw<T>) -> Result<ArmFactor<T>> {
        let h = &d.gamma[j];
        let mut block = cov_symmetric(self.x_lf, h);
        let noise = T::one() / (d.lambda_eta * self.lf_diag[j]);
        for i in 0..block.nrows() {
            block[(i, i)] += noise;
        }
        let nh = self.x_hf.n();
        let mut coupling = DMatrix::zeros(self.x_lf.n(), self.hub_size());
        coupling
            .columns_mut(j * nh, nh)
            .copy_from(&cov_matrix(self.x_lf, self.x_hf, h)?);
        ArmFactor::new(&block, Some(&coupling), &self.gamma_lf.column(j).clone_owned())
    }

    fn hub_cov(&self, d: &MfDraw<T>) -> DMatrix<T> {
        let nh = self.x_hf.n();
        let q = self.q();
        let mut s = DMatrix::zeros(q * nh, q * nh);
        for (c, h) in d.gamma.iter().chain(&d.zeta).enumerate() {
            s.view_mut((c * nh, c * nh), (nh, nh)).copy_from(&cov_symmetric(self.x_hf, h));
        }
        let inv_l = T::one() / d.lambda_delta;
        for a in 0..q {
            for b in 0..q {
                let v = self.m_inv[(a, b)] * inv_l;
                for i in 0..nh {
                    s[(a * nh + i, b * nh + i)] += v;
                }
            }
        }
        s
    }

    fn hub(&self, arms: &[ArmFactor<T>], d: &MfDraw<T>) -> Result<HubFactor<T>> {
        let y = DVector::from_column_slice(self.theta_hf.as_slice());
        HubFactor::new(arms, &self.hub_cov(d), &y)
    }

    fn factor(&self, d: &MfDraw<T>) -> Result<(Vec<ArmFactor<T>>, HubFactor<T>)> {
        let arms = (0..self.r()).map(|j| self.arm(j, d)).collect::<Result<Vec<_>>>()?;
        let hub = self.hub(&arms, d)?;
        Ok((arms, hub))
    }

    /// Joint conditional `(mean, cov)` of `[γ*(x), ζ*(x)]` at each row of
    /// `x_star`, given the factored covariance of the statistics.
    fn conditional(
        &self,
        d: &MfDraw<T>,
        arms: &[ArmFactor<T>],
        hub: &HubFactor<T>,
        x_star: &DesignMatrix<T>,
    ) -> Result<Vec<(DVector<T>, DMatrix<T>)>> {
        let r = self.r();
        let q = self.q();
        let m = x_star.n();
        let nh = self.x_hf.n();
        let mut v_arms = Vec::with_capacity(r);
        for (j, h) in d.gamma.iter().enumerate() {
            let k = cov_matrix(self.x_lf, x_star, h)?;
            let mut v = DMatrix::zeros(self.x_lf.n(), q * m);
            for t in 0..m {
                v.set_column(t * q + j, &k.column(t));
            }
            v_arms.push(v);
        }
        let mut v_hub = DMatrix::zeros(self.hub_size(), q * m);
        for (c, h) in d.gamma.iter().chain(&d.zeta).enumerate() {
            let k = cov_matrix(self.x_hf, x_star, h)?;
            for t in 0..m {
                v_hub.view_mut((c * nh, t * q + c), (nh, 1)).copy_from(&k.column(t));
            }
        }
        let y_arms: Vec<DMatrix<T>> = (0..r)
            .map(|j| DMatrix::from_column_slice(self.x_lf.n(), 1, self.gamma_lf.column(j).as_slice()))
            .collect();
        let y_hub = DMatrix::from_column_slice(self.hub_size(), 1, self.theta_hf.as_slice());
        let (ax, hx) = blockcov::solve(arms, Some(hub), &y_arms, Some(&y_hub))?;
        let (vx, vhx) = blockcov::solve(arms, Some(hub), &v_arms, Some(&v_hub))?;
        let (hx, vhx) = (hx.expect("hub given"), vhx.expect("hub given"));

        let prior: Vec<T> = d.gamma.iter().chain(&d.zeta).map(|h| h.variance()).collect();
        let mut out = Vec::with_capacity(m);
        for t in 0..m {
            let cols = t * q..(t + 1) * q;
            let mut mean = DVector::zeros(q);
            let mut cov = DMatrix::from_diagonal(&DVector::from_vec(prior.clone()));
            for c in 0..q {
                let col = t * q + c;
                let mut s = v_hub.column(col).dot(&hx.column(0));
                for j in 0..r {
                    s += v_arms[j].column(col).dot(&ax[j].column(0));
                }
                mean[c] = s;
                for c2 in cols.clone() {
                    let mut w = v_hub.column(col).dot(&vhx.column(c2));
                    for j in 0..r {
                        w += v_arms[j].column(col).dot(&vx[j].column(c2));
                    }
                    cov[(c, c2 - t * q)] -= w;
                }
            }
            out.push((mean, (&cov + cov.transpose()) * T::lit(0.5)));
        }
        Ok(out)
    }
}

/// Log posterior of the joint model over the GP hyperparameters of the LF
/// weights (shared by LF and HF design points), those of the discrepancy
/// weights, `λ_η` and `λ_δ`.
pub(crate) struct MfTarget<'a, T: Real> {
    pub sys: MfSystem<'a, T>,
    pub gamma_bank: GpBank,
    pub zeta_bank: GpBank,
    pub gamma_eta: (f64, f64),
    pub gamma_delta: (f64, f64),
    pub precision_lf: Prior,
    pub precision_hf: Prior,
    pub lengthscale: Prior,
}

#[derive(Clone)]
pub(crate) struct MfState<T: Real> {
    arms: Vec<ArmFactor<T>>,
    hub: HubFactor<T>,
    priors: Vec<f64>,
    lambda_terms: [f64; 2],
}

impl<T: Real> MfTarget<'_, T> {
    fn lambda_index(&self) -> usize {
        self.zeta_bank.end()
    }

    fn draw(&self, params: &[f64]) -> MfDraw<T> {
        let li = self.lambda_index();
        MfDraw {
            gamma: (0..self.gamma_bank.count).map(|j| self.gamma_bank.hyper(params, j)).collect(),
            zeta: (0..self.zeta_bank.count).map(|j| self.zeta_bank.hyper(params, j)).collect(),
            lambda_eta: T::lit(params[li]),
            lambda_delta: T::lit(params[li + 1]),
        }
    }

    fn prior_term(&self, params: &[f64], c: usize) -> Result<f64> {
        let r = self.gamma_bank.count;
        if c < r {
            self.gamma_bank.log_prior(params, c, self.precision_lf, self.lengthscale)
        } else {
            self.zeta_bank.log_prior(params, c - r, self.precision_hf, self.lengthscale)
        }
    }

    fn lambda_terms(&self, params: &[f64]) -> Result<[f64; 2]> {
        let li = self.lambda_index();
        let (a, b) = self.gamma_eta;
        let (a2, b2) = self.gamma_delta;
        Ok([
            Prior::Gamma { shape: a, rate: b }.logpdf(params[li])?,
            Prior::Gamma { shape: a2, rate: b2 }.logpdf(params[li + 1])?,
        ])
    }
}

impl<T: Real> LogTarget for MfTarget<'_, T> {
    type State = MfState<T>;

    fn names(&self) -> Vec<String> {
        let mut n = self.gamma_bank.names();
        n.extend(self.zeta_bank.names());
        n.push("lambda_eta".into());
        n.push("lambda_delta".into());
        n
    }

    fn evaluate(&self, params: &[f64]) -> Result<MfState<T>> {
        let d = self.draw(params);
        let (arms, hub) = self.sys.factor(&d)?;
        let priors = (0..self.gamma_bank.count + self.zeta_bank.count)
            .map(|c| self.prior_term(params, c))
            .collect::<Result<_>>()?;
        Ok(MfState {
            arms,
            hub,
            priors,
            lambda_terms: self.lambda_terms(params)?,
        })
    }

    fn value(&self, s: &MfState<T>) -> f64 {
        blockcov::log_density(&s.arms, Some(&s.hub)).as_f64()
            + s.priors.iter().sum::<f64>()
            + s.lambda_terms[0]
            + s.lambda_terms[1]
    }

    fn update(&self, state: &MfState<T>, params: &[f64], changed: usize) -> Result<MfState<T>> {
        let d = self.draw(params);
        let li = self.lambda_index();
        let mut s = state.clone();
        if let Some(j) = self.gamma_bank.owner(changed) {
            s.arms[j] = self.sys.arm(j, &d)?;
            s.priors[j] = self.prior_term(params, j)?;
        } else if let Some(j) = self.zeta_bank.owner(changed) {
            let c = self.gamma_bank.count + j;
            s.priors[c] = self.prior_term(params, c)?;
        } else if changed == li {
            s.arms = (0..self.sys.r()).map(|j| self.sys.arm(j, &d)).collect::<Result<_>>()?;
            s.lambda_terms = self.lambda_terms(params)?;
        } else {
            s.lambda_terms = self.lambda_terms(params)?;
        }
        s.hub = self.sys.hub(&s.arms, &d)?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfEmulator<T: Real> {
    /// Standalone LF fit (its own posterior); also the LF-Tensor comparator.
    pub lf: SfEmulator<T>,
    pub lf_mesh: MeshCoords<T>,
    pub hf_mesh: MeshCoords<T>,
    pub parts: MfParts<T>,
    pub design_hf: DesignMatrix<T>,
    /// `γ̂^HF`, LF weights at the HF design.
    pub hf_weights: DMatrix<T>,
    /// `M` with `KᵀK = M ⊗ I`.
    pub core_gram: DMatrix<T>,
    /// `θ̃^HF` (`n_x^HF × (r_x + r′_x)`).
    pub theta_hf: DMatrix<T>,
    pub samples: PosteriorSamples,
    /// `(a′_δ, b′_δ)`
    pub delta_hyper: (f64, f64),
    pub hf_sq_norm: f64,
    pub k_interp: usize,
    pub priors: PriorConfig,
    pub transform: Option<TransformSpec<T>>,
    pub seed: u64,
}

impl<T: Real> MfEmulator<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        z_lf: &DenseTensor<T>,
        z_hf: &DenseTensor<T>,
        x_lf: &DesignMatrix<T>,
        x_hf: &DesignMatrix<T>,
        lf_mesh: &MeshCoords<T>,
        hf_mesh: &MeshCoords<T>,
        lf_ranks: &[usize],
        disc_ranks: &[usize],
        opts: &MfOptions,
    ) -> Result<Self> {
        let (lf_tucker, _) = hooi(z_lf, lf_ranks, opts.hooi)?;
        let lf = SfEmulator::fit(z_lf, x_lf, &lf_tucker, &opts.sf())?;
        Self::fit_with_lf(lf, z_hf, x_hf, lf_mesh, hf_mesh, disc_ranks, opts)
    }

    /// Joint fit given an already fitted LF emulator.
    pub fn fit_with_lf(
        lf: SfEmulator<T>,
        z_hf: &DenseTensor<T>,
        x_hf: &DesignMatrix<T>,
        lf_mesh: &MeshCoords<T>,
        hf_mesh: &MeshCoords<T>,
        disc_ranks: &[usize],
        opts: &MfOptions,
    ) -> Result<Self> {
        opts.mcmc.validate()?;
        opts.priors.validate()?;
        let d = z_hf.dims();
        if z_hf.order() != 4 || d[0] != hf_mesh.len() || d[3] != x_hf.n() {
            return Err(Error::dim(format!(
                "HF ensemble dims {:?} do not match {} mesh points and {} design rows",
                d,
                hf_mesh.len(),
                x_hf.n()
            )));
        }
        let lf_dims = lf.tucker.dims();
        if d[1] != lf_dims[1] || d[2] != lf_dims[2] {
            return Err(Error::dim("temporal modes differ between fidelities"));
        }
        if !z_hf.is_all_finite() {
            return Err(Error::NonFinite("HF ensemble".into()));
        }
        let f = lf.tucker.factors();
        let us_tilde = interpolate_bases(&f[0], lf_mesh, hf_mesh, opts.k_interp)?;
        let hf_weights = hf_effective_weights(&lf, x_hf)?;
        let delta = discrepancy_ensemble(z_hf, lf.tucker.core(), &us_tilde, &f[1], &f[2], &hf_weights)?;
        let (disc, _) = hooi(&delta, disc_ranks, opts.hooi)?;
        let parts = MfParts {
            core: lf.tucker.core().clone(),
            us_tilde,
            um: f[1].clone(),
            uy: f[2].clone(),
            disc: disc.align_last_mode(),
        };

        let m = mf_core_gram(&parts)?;
        let m_inv = spd_inverse(&m)?;
        let q_h = mf_project_data(z_hf, &parts)?;
        let theta_hf = &q_h * &m_inv;
        let explained = explained_quadratic(&q_h, &m)?.as_f64();
        let hf_sq_norm = z_hf.norm_squared().as_f64();
        let n_field = (d[0] * d[1] * d[2]) as f64;
        let a_delta = opts.priors.a + d[3] as f64 * (n_field - m.nrows() as f64) / 2.0;
        let b_delta = opts.priors.b + (hf_sq_norm - explained).max(0.0) / 2.0;

        let p = x_hf.p();
        let r = parts.r_lf();
        let gamma_bank = GpBank { prefix: "gamma".into(), count: r, p, offset: 0 };
        let zeta_bank = GpBank {
            prefix: "zeta".into(),
            count: parts.r_disc(),
            p,
            offset: gamma_bank.end(),
        };
        let target = MfTarget {
            sys: MfSystem {
                x_lf: &lf.design,
                x_hf,
                gamma_lf: &lf.gamma_hat,
                lf_diag: &lf.gram_diag,
                theta_hf: &theta_hf,
                m_inv: &m_inv,
            },
            gamma_bank: gamma_bank.clone(),
            zeta_bank: zeta_bank.clone(),
            gamma_eta: (lf.a_post, lf.b_post),
            gamma_delta: (a_delta, b_delta),
            precision_lf: opts.priors.precision_prior(lf.design.n()),
            precision_hf: opts.priors.precision_prior(x_hf.n()),
            lengthscale: opts.priors.lengthscale_prior(),
        };

        let sf_opts = opts.sf();
        let (mut init, mut scales) = initial_point(&gamma_bank, &lf.gamma_hat, &sf_opts, lf.a_post, lf.b_post);
        let lambda_eta = (init.pop().expect("noise term"), scales.pop().expect("noise term"));
        let zeta_stat = theta_hf.columns(r, parts.r_disc()).clone_owned();
        let (zi, zs) = initial_point(&zeta_bank, &zeta_stat, &sf_opts, a_delta, b_delta);
        init.extend(&zi[..zeta_bank.width()]);
        scales.extend(&zs[..zeta_bank.width()]);
        init.push(lambda_eta.0);
        scales.push(lambda_eta.1);
        init.push(zi[zeta_bank.width()]);
        scales.push(zs[zeta_bank.width()]);

        let samples = run_chains(&target, &init, Some(&scales), &opts.mcmc)?;
        Ok(Self {
            lf,
            lf_mesh: lf_mesh.clone(),
            hf_mesh: hf_mesh.clone(),
            parts,
            design_hf: x_hf.clone(),
            hf_weights,
            core_gram: m,
            theta_hf,
            samples,
            delta_hyper: (a_delta, b_delta),
            hf_sq_norm,
            k_interp: opts.k_interp,
            priors: opts.priors.clone(),
            transform: None,
            seed: opts.mcmc.seed,
        })
    }

    pub fn with_transform(mut self, t: Option<TransformSpec<T>>) -> Self {
        self.lf.transform = t;
        self.transform = t;
        self
    }

    pub fn output_dims(&self) -> Vec<usize> {
        let d = self.lf.tucker.dims();
        vec![self.hf_mesh.len(), d[1], d[2]]
    }

    fn banks(&self) -> (GpBank, GpBank) {
        let p = self.design_hf.p();
        let g = GpBank { prefix: "gamma".into(), count: self.parts.r_lf(), p, offset: 0 };
        let z = GpBank {
            prefix: "zeta".into(),
            count: self.parts.r_disc(),
            p,
            offset: g.end(),
        };
        (g, z)
    }

    pub fn draw_from_params(&self, params: &[f64]) -> MfDraw<T> {
        let (g, z) = self.banks();
        let li = z.end();
        MfDraw {
            gamma: (0..g.count).map(|j| g.hyper(params, j)).collect(),
            zeta: (0..z.count).map(|j| z.hyper(params, j)).collect(),
            lambda_eta: T::lit(params[li]),
            lambda_delta: T::lit(params[li + 1]),
        }
    }

    fn with_system<R>(&self, f: impl FnOnce(&MfSystem<'_, T>) -> Result<R>) -> Result<R> {
        let m_inv = spd_inverse(&self.core_gram)?;
        let sys = MfSystem {
            x_lf: &self.lf.design,
            x_hf: &self.design_hf,
            gamma_lf: &self.lf.gamma_hat,
            lf_diag: &self.lf.gram_diag,
            theta_hf: &self.theta_hf,
            m_inv: &m_inv,
        };
        f(&sys)
    }

    /// Log-likelihood of the LF and HF data under fixed hyperparameters, up
    /// to a hyperparameter-free constant.
    pub fn reduced_log_likelihood(&self, d: &MfDraw<T>) -> Result<f64> {
        let ll = self.with_system(|sys| {
            let (arms, hub) = sys.factor(d)?;
            Ok(blockcov::log_density(&arms, Some(&hub)).as_f64())
        })?;
        let le = d.lambda_eta.as_f64();
        let ld = d.lambda_delta.as_f64();
        let (a_d, b_d) = self.delta_hyper;
        Ok(ll + (self.lf.a_post - self.priors.a) * le.ln() - (self.lf.b_post - self.priors.b) * le
            + (a_d - self.priors.a) * ld.ln()
            - (b_d - self.priors.b) * ld)
    }

    /// Joint conditional mean and covariance of `[γ*, ζ*]` at each point.
    pub fn weight_conditional(&self, d: &MfDraw<T>, x_star: &DesignMatrix<T>) -> Result<Vec<(DVector<T>, DMatrix<T>)>> {
        if x_star.p() != self.design_hf.p() {
            return Err(Error::dim("prediction inputs differ in dimension from the design"));
        }
        self.with_system(|sys| {
            let (arms, hub) = sys.factor(d)?;
            sys.conditional(d, &arms, &hub, x_star)
        })
    }

    /// HF predictive fields at every row of `x_star`.
    pub fn predict_many(&self, x_star: &DesignMatrix<T>, n_draws: usize) -> Result<Vec<PredictionResult<T>>> {
        if x_star.p() != self.design_hf.p() {
            return Err(Error::dim("prediction inputs differ in dimension from the design"));
        }
        let params = self.samples.thin(n_draws);
        if params.is_empty() {
            return Err(Error::Contract("model has no posterior draws".into()));
        }
        let q = self.parts.r_lf() + self.parts.r_disc();
        let m = x_star.n();
        let per_draw: Vec<(DMatrix<T>, T)> = self.with_system(|sys| {
            params
                .par_iter()
                .enumerate()
                .map(|(k, p)| {
                    let d = self.draw_from_params(p);
                    let (arms, hub) = sys.factor(&d)?;
                    let cond = sys.conditional(&d, &arms, &hub, x_star)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0002);
                    rng.set_stream(k as u64);
                    let mut g = DMatrix::zeros(q, m);
                    for (t, (mean, cov)) in cond.iter().enumerate() {
                        let scale = cov.diagonal().max().max(T::lit(1e-300));
                        let chol = cholesky_escalating(cov, T::lit(1e-10) * scale)?;
                        let e = DVector::from_fn(q, |_, _| {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            T::lit(v)
                        });
                        g.set_column(t, &(mean + chol.l() * e));
                    }
                    Ok((g, (T::one() / d.lambda_delta).sqrt()))
                })
                .collect()
        })?;
        let basis = self.parts.hf_field_basis()?;
        let dims = self.output_dims();
        let dn = per_draw.len();
        (0..m)
            .map(|t| {
                let mut coeffs = DMatrix::zeros(q, dn);
                for (k, (g, _)) in per_draw.iter().enumerate() {
                    coeffs.set_column(k, &g.column(t));
                }
                DrawSource {
                    dims: dims.clone(),
                    offset: Vec::new(),
                    basis: basis.clone(),
                    coeffs,
                    noise_sd: per_draw.iter().map(|x| x.1).collect(),
                    entry_scale: Vec::new(),
                    seed: noise_seed(self.seed ^ 0x0f1d, t),
                    transform: self.transform,
                }
                .summarize()
            })
            .collect()
    }

    pub fn predict(&self, x_star: &[T], n_draws: usize) -> Result<PredictionResult<T>> {
        let mut v = self.predict_many(&DesignMatrix::single(x_star)?, n_draws)?;
        Ok(v.remove(0))
    }

    /// Posterior mean length scales of the LF weights and of the discrepancy
    /// weights, one row per weight.
    pub fn lengthscale_means(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (g, z) = self.banks();
        let mean = self.samples.posterior_mean();
        let pick = |b: &GpBank| -> Vec<Vec<f64>> {
            (0..b.count)
                .map(|j| {
                    let s = b.offset + j * (b.p + 1);
                    mean[s + 1..s + 1 + b.p].to_vec()
                })
                .collect()
        };
        (pick(&g), pick(&z))
    }

    /// The LF emulator alone, with its bases carried to the HF mesh.
    pub fn predict_lf_tensor(&self, x_star: &DesignMatrix<T>, n_draws: usize) -> Result<Vec<PredictionResult<T>>> {
        let basis = self.parts.lf_field_basis()?;
        self.lf.predict_with_basis(x_star, n_draws, basis, self.output_dims())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::kron;
    use rand::Rng;

    fn mesh1d(v: &[f64]) -> MeshCoords<f64> {
        MeshCoords::new(v.iter().map(|&x| vec![x, 0.0]).collect()).unwrap()
    }

    #[test]
    fn nearest_neighbour_averages() {
        let lf = mesh1d(&[0.0, 1.0]);
        let hf = mesh1d(&[0.4]);
        let u = DMatrix::from_column_slice(2, 1, &[10.0, 20.0]);
        assert_eq!(interpolate_bases(&u, &lf, &hf, 2).unwrap()[(0, 0)], 15.0);
        assert_eq!(interpolate_bases(&u, &lf, &hf, 1).unwrap()[(0, 0)], 10.0);
        // equidistant: lower index wins
        let mid = mesh1d(&[0.5]);
        assert_eq!(interpolate_bases(&u, &lf, &mid, 1).unwrap()[(0, 0)], 10.0);
        assert!(interpolate_bases(&u, &lf, &hf, 3).is_err());
        assert!(interpolate_bases(&u, &lf, &hf, 0).is_err());
    }

    #[test]
    fn self_interpolation_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let mesh = MeshCoords::new(pts).unwrap();
        let u = DMatrix::from_fn(12, 3, |i, j| if j == 2 { 0.7 } else { (i * (j + 1)) as f64 });
        assert_eq!(interpolate_bases(&u, &mesh, &mesh, 1).unwrap(), u);
        let hf = MeshCoords::new((0..20).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()).unwrap();
        for k in 1..=12 {
            let out = interpolate_bases(&u, &mesh, &hf, k).unwrap();
            assert!(out.column(2).iter().all(|v| (v - 0.7).abs() < 1e-14));
        }
    }

    #[test]
    fn matches_exhaustive_neighbour_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lf = MeshCoords::new((0..30).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()).unwrap();
        let hf = MeshCoords::new((0..15).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()).unwrap();
        let u = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-1.0..1.0));
        let k = 4;
        let out = interpolate_bases(&u, &lf, &hf, k).unwrap();
        for (h, p) in hf.points().iter().enumerate() {
            let mut idx: Vec<usize> = (0..30).collect();
            let dist = |i: usize| -> f64 {
                let q = &lf.points()[i];
                let (a, b): (f64, f64) = (p[0] - q[0], p[1] - q[1]);
                a * a + b * b
            };
            idx.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));
            for c in 0..2 {
                let mean: f64 = idx[..k].iter().map(|&i| u[(i, c)]).sum::<f64>() / k as f64;
                assert!((out[(h, c)] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicate_mesh_points_rejected() {
        assert!(MeshCoords::new(vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![0.0, 1.0]]).is_err());
        assert!(MeshCoords::<f64>::new(vec![]).is_err());
        assert!(MeshCoords::new(vec![vec![0.0]]).is_err());
    }

    fn random_orthonormal(n: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        a.qr().q().columns(0, r).clone_owned()
    }

    fn random_parts(seed: u64) -> MfParts<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = DenseTensor::from_fn(vec![2, 2, 1, 2], |_| rng.random_range(-1.0..1.0)).unwrap();
        let us_tilde = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-0.5..0.5));
        let um = random_orthonormal(3, 2, &mut rng);
        let uy = random_orthonormal(2, 1, &mut rng);
        let dcore = DenseTensor::from_fn(vec![2, 1, 1, 2], |_| rng.random_range(-1.0..1.0)).unwrap();
        let disc = TuckerModel::new(
            dcore,
            vec![
                random_orthonormal(7, 2, &mut rng),
                random_orthonormal(3, 1, &mut rng),
                random_orthonormal(2, 1, &mut rng),
                random_orthonormal(4, 2, &mut rng),
            ],
        )
        .unwrap()
        .align_last_mode();
        MfParts { core, us_tilde, um, uy, disc }
    }

    /// Dense `K` from Kronecker products of the factor matrices.
    fn dense_k(parts: &MfParts<f64>, n_hf: usize) -> DMatrix<f64> {
        let b = kron(&parts.uy, &kron(&parts.um, &parts.us_tilde)) * parts.core.unfold(3).unwrap().transpose();
        let f = parts.disc.factors();
        let d = kron(&f[2], &kron(&f[1], &f[0])) * parts.disc.core().unfold(3).unwrap().transpose();
        let n = b.nrows();
        let q = b.ncols() + d.ncols();
        let mut k = DMatrix::zeros(n * n_hf, q * n_hf);
        for c in 0..q {
            let col = if c < b.ncols() { b.column(c).clone_owned() } else { d.column(c - b.ncols()).clone_owned() };
            for i in 0..n_hf {
                k.view_mut((i * n, c * n_hf + i), (n, 1)).copy_from(&col);
            }
        }
        k
    }

    #[test]
    fn gram_and_projection_match_dense_k() {
        let parts = random_parts(3);
        let k = dense_k(&parts, 4);
        let ktk = mf_reduced_gram(&parts, 4).unwrap();
        assert!((&ktk - k.transpose() * &k).amax() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = DenseTensor::from_fn(vec![7, 3, 2, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
        let q = mf_project_data(&z, &parts).unwrap();
        let dense = k.transpose() * z.vectorize();
        assert!((DVector::from_column_slice(q.as_slice()) - dense).amax() < 1e-10);

        let m = mf_core_gram(&parts).unwrap();
        let g = parts.disc.core().unfold(3).unwrap();
        assert!((m.view((2, 2), (2, 2)) - &g * g.transpose()).amax() < 1e-12);
    }

    #[test]
    fn orthogonal_pieces_give_block_diagonal_gram() {
        let mut parts = random_parts(5);
        // discrepancy spatial basis orthogonal to the interpolated LF one
        let mut us = DMatrix::zeros(7, 2);
        us[(0, 0)] = 1.0;
        us[(1, 1)] = 1.0;
        parts.us_tilde = us;
        let mut ds = DMatrix::zeros(7, 2);
        ds[(2, 0)] = 1.0;
        ds[(3, 1)] = 1.0;
        let mut f = parts.disc.factors().to_vec();
        f[0] = ds;
        parts.disc = TuckerModel::new(parts.disc.core().clone(), f).unwrap();
        let m = mf_core_gram(&parts).unwrap();
        assert!(m.view((0, 2), (2, 2)).amax() < 1e-15);
    }

    #[test]
    fn discrepancy_of_lf_reconstruction_is_an_offset() {
        let parts = random_parts(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gamma = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let h = parts.lf_field_basis().unwrap();
        let lf_fields = &h * gamma.transpose();
        let c = 0.37;
        let z = DenseTensor::new(vec![7, 3, 2, 4], lf_fields.as_slice().iter().map(|v| v + c).collect()).unwrap();
        let d = discrepancy_ensemble(&z, &parts.core, &parts.us_tilde, &parts.um, &parts.uy, &gamma).unwrap();
        assert_eq!(d.dims(), &[7, 3, 2, 4]);
        assert!(d.values().iter().all(|v| (v - c).abs() < 1e-8));
    }
}
