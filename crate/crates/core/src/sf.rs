//! Single-fidelity tensor emulator.
//!
//! An ensemble `Z` of shape `n_s × n_m × n_y × n_x` is compressed to
//! `G ×_1 U_s ×_2 U_m ×_3 U_y ×_4 U_x`. Write `z = vec(Z)` and let `C` map the
//! weight-major effective weights `γ` (index `j·n_x + i`) to `z`. Because every
//! factor is orthonormal,
//!
//! * `CᵀC = (G_(4) G_(4)ᵀ) ⊗ I_{n_x}`,
//! * `Cᵀz = vec(P_(4) G_(4)ᵀ)` with `P = Z ×_1 U_sᵀ ×_2 U_mᵀ ×_3 U_yᵀ`,
//!
//! so the likelihood of `z` reduces to one for the `r_x·n_x` statistic
//! `γ̂ = (CᵀC)⁻¹ Cᵀz` plus a Gamma update of the noise precision. After the
//! design mode is aligned `G_(4) G_(4)ᵀ` is diagonal and the reduced model
//! splits into one independent Gaussian process per effective weight.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cov_symmetric, kernel, DesignMatrix, GpHyperparams};
use crate::linalg::{cholesky_escalating, mean_diagonal, spd_inverse};
use crate::mcmc::{run_chains, LogTarget, McmcConfig, PosteriorSamples, Prior};
use crate::predict::{DrawSource, PredictionResult};
use crate::scalar::Real;
use crate::tensor::DenseTensor;
use crate::transform::TransformSpec;
use crate::tucker::{hooi, HooiConfig, TuckerModel};

/// Hyperprior settings shared by the single- and multi-fidelity models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Gamma shape of every noise precision.
    pub a: f64,
    /// Gamma rate of every noise precision.
    pub b: f64,
    /// Scale of the folded-normal prior on GP precisions. `None` uses the
    /// number of design points behind each weight, which matches the natural
    /// size `1 / n_x` of squared orthonormal-column entries.
    pub precision_scale: Option<f64>,
    pub lengthscale_mu: f64,
    pub lengthscale_sigma: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.5,
            precision_scale: None,
            lengthscale_mu: 0.0,
            lengthscale_sigma: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0
            && self.b > 0.0
            && self.lengthscale_sigma > 0.0
            && self.lengthscale_mu.is_finite()
            && self.precision_scale.is_none_or(|s| s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config("priors need a, b, lengthscale_sigma > 0 and a positive precision_scale".into()))
        }
    }

    pub(crate) fn precision_prior(&self, n_points: usize) -> Prior {
        Prior::FoldedNormal {
            scale: self.precision_scale.unwrap_or(n_points as f64),
        }
    }

    pub(crate) fn lengthscale_prior(&self) -> Prior {
        Prior::LogNormal {
            mu: self.lengthscale_mu,
            sigma: self.lengthscale_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfOptions {
    pub mcmc: McmcConfig,
    pub priors: PriorConfig,
    /// Holds the noise precision fixed instead of sampling it.
    pub fixed_noise_precision: Option<f64>,
}

impl Default for SfOptions {
    fn default() -> Self {
        Self {
            mcmc: McmcConfig::default(),
            priors: PriorConfig::default(),
            fixed_noise_precision: None,
        }
    }
}

/// Parameter layout of a bank of independent GPs inside a sampler vector:
/// for GP `j`, `[precision, ℓ_1, …, ℓ_p]` starting at `offset + j·(p+1)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GpBank {
    pub prefix: String,
    pub count: usize,
    pub p: usize,
    pub offset: usize,
}

impl GpBank {
    pub fn width(&self) -> usize {
        self.count * (self.p + 1)
    }

    pub fn end(&self) -> usize {
        self.offset + self.width()
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        for j in 1..=self.count {
            out.push(format!("{}_precision_{j}", self.prefix));
            for d in 1..=self.p {
                out.push(format!("{}_lengthscale_{j}_x{d}", self.prefix));
            }
        }
        out
    }

    /// GP owning sampler component `idx`, if any.
    pub fn owner(&self, idx: usize) -> Option<usize> {
        (idx >= self.offset && idx < self.end()).then(|| (idx - self.offset) / (self.p + 1))
    }

    pub fn hyper<T: Real>(&self, params: &[f64], j: usize) -> GpHyperparams<T> {
        let s = self.offset + j * (self.p + 1);
        GpHyperparams {
            precision: T::lit(params[s]),
            length_scales: params[s + 1..s + 1 + self.p].iter().map(|&v| T::lit(v)).collect(),
        }
    }

    pub fn log_prior(&self, params: &[f64], j: usize, precision: Prior, lengthscale: Prior) -> Result<f64> {
        let s = self.offset + j * (self.p + 1);
        let mut lp = precision.logpdf(params[s])?;
        for &l in &params[s + 1..s + 1 + self.p] {
            lp += lengthscale.logpdf(l)?;
        }
        Ok(lp)
    }
}

fn require_order4<T: Real>(tucker: &TuckerModel<T>) -> Result<()> {
    if tucker.order() != 4 {
        return Err(Error::dim(format!(
            "emulators need a 4-mode (space, month, year, design) model, got order {}",
            tucker.order()
        )));
    }
    Ok(())
}

fn require_orthonormal<T: Real>(tucker: &TuckerModel<T>) -> Result<()> {
    let defect = tucker.orthonormality_defect();
    if defect > T::lit(1e-8) {
        return Err(Error::Contract(format!(
            "Tucker factors are not orthonormal (defect {:e})",
            defect.as_f64()
        )));
    }
    Ok(())
}

/// The observed effective weights: the design-mode factor `U_x` (`n_x × r_x`).
pub fn effective_weights<T: Real>(tucker: &TuckerModel<T>) -> Result<DMatrix<T>> {
    require_order4(tucker)?;
    Ok(tucker.factor(3).clone())
}

/// Full basis weights, row `i` = `G_(4)ᵀ γ_i` (`n_x × r_s r_m r_y`).
pub fn basis_weights<T: Real>(tucker: &TuckerModel<T>) -> Result<DMatrix<T>> {
    require_order4(tucker)?;
    Ok(tucker.factor(3) * tucker.core().unfold(3)?)
}

/// `G_(4) G_(4)ᵀ`.
pub fn core_gram<T: Real>(tucker: &TuckerModel<T>) -> Result<DMatrix<T>> {
    require_order4(tucker)?;
    let g = tucker.core().unfold(3)?;
    Ok(&g * g.transpose())
}

/// `CᵀC = (G_(4) G_(4)ᵀ) ⊗ I_{n_x}`, built from the core alone.
pub fn reduced_gram<T: Real>(tucker: &TuckerModel<T>) -> Result<DMatrix<T>> {
    require_orthonormal(tucker)?;
    let a = core_gram(tucker)?;
    let nx = tucker.factor(3).nrows();
    Ok(a.kronecker(&DMatrix::<T>::identity(nx, nx)))
}

/// `P_(4) G_(4)ᵀ` for `P = Z ×_1 U_sᵀ ×_2 U_mᵀ ×_3 U_yᵀ`, with explicit
/// spatial/temporal factors so interpolated bases can be used.
pub(crate) fn projected_weights_with<T: Real>(
    z: &DenseTensor<T>,
    us: &DMatrix<T>,
    um: &DMatrix<T>,
    uy: &DMatrix<T>,
    core: &DenseTensor<T>,
) -> Result<DMatrix<T>> {
    if z.order() != 4 {
        return Err(Error::dim("data tensor must have four modes"));
    }
    let d = z.dims();
    if d[0] != us.nrows() || d[1] != um.nrows() || d[2] != uy.nrows() {
        return Err(Error::dim(format!(
            "data dims {:?} do not match basis rows ({}, {}, {})",
            d,
            us.nrows(),
            um.nrows(),
            uy.nrows()
        )));
    }
    let p = z
        .mode_product(&us.transpose(), 0)?
        .mode_product(&um.transpose(), 1)?
        .mode_product(&uy.transpose(), 2)?;
    Ok(p.unfold(3)? * core.unfold(3)?.transpose())
}

/// `Cᵀz` as an `n_x × r_x` matrix (column `j` holds weight `j`).
pub fn projected_weights<T: Real>(z: &DenseTensor<T>, tucker: &TuckerModel<T>) -> Result<DMatrix<T>> {
    require_order4(tucker)?;
    let f = tucker.factors();
    projected_weights_with(z, &f[0], &f[1], &f[2], tucker.core())
}

/// `Cᵀz` in weight-major order.
pub fn project_data<T: Real>(z: &DenseTensor<T>, tucker: &TuckerModel<T>) -> Result<DVector<T>> {
    let q = projected_weights(z, tucker)?;
    if z.dims()[3] != tucker.factor(3).nrows() {
        return Err(Error::dim("design count differs between data and model"));
    }
    Ok(DVector::from_column_slice(q.as_slice()))
}

/// `(Cᵀz)ᵀ (CᵀC)⁻¹ (Cᵀz)` from the `n_x × r` projection and the `r × r`
/// Gram matrix.
pub(crate) fn explained_quadratic<T: Real>(q: &DMatrix<T>, gram: &DMatrix<T>) -> Result<T> {
    let inv = spd_inverse(gram)?;
    Ok((q * inv).component_mul(q).sum())
}

/// Updated Gamma hyperparameters `(a', b')` of the noise precision.
pub fn reduced_hyperparams<T: Real>(
    z: &DenseTensor<T>,
    tucker: &TuckerModel<T>,
    a: f64,
    b: f64,
) -> Result<(f64, f64)> {
    require_orthonormal(tucker)?;
    let q = projected_weights(z, tucker)?;
    let gram = core_gram(tucker)?;
    let explained = explained_quadratic(&q, &gram)?.as_f64();
    let d = z.dims();
    let n = (d[0] * d[1] * d[2]) as f64;
    let nx = d[3] as f64;
    let r = gram.nrows() as f64;
    let a_post = a + nx * (n - r) / 2.0;
    let b_post = b + (z.norm_squared().as_f64() - explained).max(0.0) / 2.0;
    Ok((a_post, b_post))
}

/// `γ̂ = (CᵀC)⁻¹ Cᵀz` for a design-aligned model, as an `n_x × r_x` matrix,
/// together with the diagonal of `G_(4) G_(4)ᵀ`.
pub(crate) fn reduced_statistic<T: Real>(
    q: &DMatrix<T>,
    gram: &DMatrix<T>,
) -> Result<(DMatrix<T>, Vec<T>)> {
    let r = gram.nrows();
    let scale = (0..r).fold(T::zero(), |m, j| m.max(gram[(j, j)].abs()));
    for i in 0..r {
        for j in 0..r {
            if i != j && gram[(i, j)].abs() > T::lit(1e-8) * scale {
                return Err(Error::Contract(
                    "design mode is not aligned (core Gram matrix is not diagonal)".into(),
                ));
            }
        }
    }
    let diag: Vec<T> = (0..r).map(|j| gram[(j, j)]).collect();
    if diag.iter().any(|d| !(*d > T::zero())) {
        return Err(Error::Factorization("core Gram matrix is singular".into()));
    }
    let mut gamma = q.clone();
    for (j, d) in diag.iter().enumerate() {
        gamma.column_mut(j).unscale_mut(*d);
    }
    Ok((gamma, diag))
}

/// `(U_y ⊗ U_m ⊗ U_s) G_(4)ᵀ`: column `j` is the field generated by a unit
/// effective weight `j` (`n_s n_m n_y × r_x`).
pub(crate) fn field_basis_with<T: Real>(
    core: &DenseTensor<T>,
    us: &DMatrix<T>,
    um: &DMatrix<T>,
    uy: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let h = core.mode_product(us, 0)?.mode_product(um, 1)?.mode_product(uy, 2)?;
    Ok(h.unfold(3)?.transpose())
}

pub fn field_basis<T: Real>(tucker: &TuckerModel<T>) -> Result<DMatrix<T>> {
    require_order4(tucker)?;
    let f = tucker.factors();
    field_basis_with(tucker.core(), &f[0], &f[1], &f[2])
}

/// Reduced log posterior of the single-fidelity model.
pub(crate) struct SfTarget<'a, T: Real> {
    pub design: &'a DesignMatrix<T>,
    pub gamma: &'a DMatrix<T>,
    pub gram_diag: &'a [T],
    pub bank: GpBank,
    pub a_post: f64,
    pub b_post: f64,
    pub fixed_lambda: Option<f64>,
    pub precision_prior: Prior,
    pub lengthscale_prior: Prior,
}

#[derive(Debug, Clone)]
pub(crate) struct SfState {
    terms: Vec<f64>,
    lambda_term: f64,
}

impl<T: Real> SfTarget<'_, T> {
    fn lambda(&self, params: &[f64]) -> f64 {
        self.fixed_lambda.unwrap_or_else(|| params[self.bank.end()])
    }

    /// Log density of weight `j`'s statistic plus its hyperpriors.
    fn term(&self, params: &[f64], j: usize, lambda: f64) -> Result<f64> {
        let h = self.bank.hyper::<T>(params, j);
        let mut k = cov_symmetric(self.design, &h);
        let noise = T::one() / (T::lit(lambda) * self.gram_diag[j]);
        for i in 0..k.nrows() {
            k[(i, i)] += noise;
        }
        let y = self.gamma.column(j).clone_owned();
        let ll = crate::gp::mvn_logpdf(&y, &DVector::zeros(y.len()), &k)?.as_f64();
        Ok(ll + self.bank.log_prior(params, j, self.precision_prior, self.lengthscale_prior)?)
    }

    fn lambda_term(&self, params: &[f64]) -> Result<f64> {
        match self.fixed_lambda {
            Some(_) => Ok(0.0),
            None => Prior::Gamma {
                shape: self.a_post,
                rate: self.b_post,
            }
            .logpdf(self.lambda(params)),
        }
    }
}

impl<T: Real> LogTarget for SfTarget<'_, T> {
    type State = SfState;

    fn names(&self) -> Vec<String> {
        let mut n = self.bank.names();
        if self.fixed_lambda.is_none() {
            n.push("lambda_eta".into());
        }
        n
    }

    fn evaluate(&self, params: &[f64]) -> Result<SfState> {
        let lambda = self.lambda(params);
        let terms = (0..self.bank.count)
            .map(|j| self.term(params, j, lambda))
            .collect::<Result<_>>()?;
        Ok(SfState {
            terms,
            lambda_term: self.lambda_term(params)?,
        })
    }

    fn value(&self, s: &SfState) -> f64 {
        s.terms.iter().sum::<f64>() + s.lambda_term
    }

    fn update(&self, state: &SfState, params: &[f64], changed: usize) -> Result<SfState> {
        match self.bank.owner(changed) {
            Some(j) => {
                let mut s = state.clone();
                s.terms[j] = self.term(params, j, self.lambda(params))?;
                Ok(s)
            }
            None => self.evaluate(params),
        }
    }

    fn delta(&self, old: &SfState, new: &SfState, changed: usize) -> f64 {
        match self.bank.owner(changed) {
            Some(j) => new.terms[j] - old.terms[j],
            None => {
                let mut d = new.lambda_term - old.lambda_term;
                for (a, b) in new.terms.iter().zip(&old.terms) {
                    d += a - b;
                }
                d
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfEmulator<T: Real> {
    /// Design-aligned Tucker model of the training ensemble.
    pub tucker: TuckerModel<T>,
    pub design: DesignMatrix<T>,
    /// Reduced statistic `γ̂` (`n_x × r_x`); equals `U_x` when the model was
    /// decomposed from the same data.
    pub gamma_hat: DMatrix<T>,
    /// Diagonal of `G_(4) G_(4)ᵀ`.
    pub gram_diag: Vec<T>,
    pub samples: PosteriorSamples,
    pub a_post: f64,
    pub b_post: f64,
    pub data_sq_norm: f64,
    pub priors: PriorConfig,
    pub fixed_noise_precision: Option<f64>,
    pub transform: Option<TransformSpec<T>>,
    pub seed: u64,
}

/// Fixed hyperparameters of one posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SfDraw<T> {
    pub gps: Vec<GpHyperparams<T>>,
    pub lambda: T,
}

impl<T: Real> SfEmulator<T> {
    /// Fits the reduced model to `z`, whose design mode is decomposed by `tucker`.
    pub fn fit(
        z: &DenseTensor<T>,
        design: &DesignMatrix<T>,
        tucker: &TuckerModel<T>,
        opts: &SfOptions,
    ) -> Result<Self> {
        opts.mcmc.validate()?;
        opts.priors.validate()?;
        require_order4(tucker)?;
        require_orthonormal(tucker)?;
        if z.order() != 4 || z.dims() != tucker.dims().as_slice() {
            return Err(Error::dim(format!(
                "data dims {:?} differ from model dims {:?}",
                z.dims(),
                tucker.dims()
            )));
        }
        if design.n() != z.dims()[3] {
            return Err(Error::dim(format!(
                "{} design rows for {} ensemble members",
                design.n(),
                z.dims()[3]
            )));
        }
        if !z.is_all_finite() {
            return Err(Error::NonFinite("training ensemble".into()));
        }
        let tucker = tucker.align_last_mode();
        let q = projected_weights(z, &tucker)?;
        let gram = core_gram(&tucker)?;
        let (gamma_hat, gram_diag) = reduced_statistic(&q, &gram)?;
        let (a_post, b_post) = reduced_hyperparams(z, &tucker, opts.priors.a, opts.priors.b)?;

        let nx = design.n();
        let bank = GpBank {
            prefix: "gamma".into(),
            count: gram_diag.len(),
            p: design.p(),
            offset: 0,
        };
        let target = SfTarget {
            design,
            gamma: &gamma_hat,
            gram_diag: &gram_diag,
            bank: bank.clone(),
            a_post,
            b_post,
            fixed_lambda: opts.fixed_noise_precision,
            precision_prior: opts.priors.precision_prior(nx),
            lengthscale_prior: opts.priors.lengthscale_prior(),
        };
        let (init, scales) = initial_point(&bank, &gamma_hat, opts, a_post, b_post);
        let samples = run_chains(&target, &init, Some(&scales), &opts.mcmc)?;
        Ok(Self {
            tucker,
            design: design.clone(),
            gamma_hat,
            gram_diag,
            samples,
            a_post,
            b_post,
            data_sq_norm: z.norm_squared().as_f64(),
            priors: opts.priors.clone(),
            fixed_noise_precision: opts.fixed_noise_precision,
            transform: None,
            seed: opts.mcmc.seed,
        })
    }

    /// Decomposes `z` at `ranks` with HOOI, then fits.
    pub fn fit_with_ranks(
        z: &DenseTensor<T>,
        design: &DesignMatrix<T>,
        ranks: &[usize],
        hooi_cfg: HooiConfig,
        opts: &SfOptions,
    ) -> Result<Self> {
        let (tucker, _) = hooi(z, ranks, hooi_cfg)?;
        Self::fit(z, design, &tucker, opts)
    }

    /// Log-likelihood of the data under fixed hyperparameters, up to a
    /// constant that does not depend on them: the reduced Gaussian density of
    /// `γ̂` plus the residual factor `λ^{(a'−a)} exp(−(b'−b) λ)`.
    pub fn reduced_log_likelihood(&self, draw: &SfDraw<T>) -> Result<f64> {
        let mut ll = 0.0;
        for (j, h) in draw.gps.iter().enumerate() {
            let mut k = cov_symmetric(&self.design, h);
            let noise = T::one() / (draw.lambda * self.gram_diag[j]);
            for i in 0..k.nrows() {
                k[(i, i)] += noise;
            }
            let y = self.gamma_hat.column(j).clone_owned();
            ll += crate::gp::mvn_logpdf(&y, &DVector::zeros(y.len()), &k)?.as_f64();
        }
        let lambda = draw.lambda.as_f64();
        Ok(ll + (self.a_post - self.priors.a) * lambda.ln() - (self.b_post - self.priors.b) * lambda)
    }

    pub fn with_transform(mut self, t: Option<TransformSpec<T>>) -> Self {
        self.transform = t;
        self
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.tucker.dims()[..3].to_vec()
    }

    pub fn n_weights(&self) -> usize {
        self.gram_diag.len()
    }

    pub(crate) fn bank(&self) -> GpBank {
        GpBank {
            prefix: "gamma".into(),
            count: self.n_weights(),
            p: self.design.p(),
            offset: 0,
        }
    }

    pub fn draw_from_params(&self, params: &[f64]) -> SfDraw<T> {
        let bank = self.bank();
        let lambda = self
            .fixed_noise_precision
            .unwrap_or_else(|| params[bank.end()]);
        SfDraw {
            gps: (0..bank.count).map(|j| bank.hyper(params, j)).collect(),
            lambda: T::lit(lambda),
        }
    }

    /// Posterior-mean hyperparameters.
    pub fn mean_draw(&self) -> SfDraw<T> {
        self.draw_from_params(&self.samples.posterior_mean())
    }

    /// `(mean, variance)` of each effective weight at every point of `x_star`
    /// under fixed hyperparameters: rows index points, columns weights.
    pub fn weight_conditional(&self, draw: &SfDraw<T>, x_star: &DesignMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
        self.conditional(draw, x_star, true)
    }

    /// As [`Self::weight_conditional`] but treating `γ̂` as noise-free
    /// observations of the weight processes, so the mean interpolates `γ̂`.
    pub fn weight_interpolant(&self, draw: &SfDraw<T>, x_star: &DesignMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
        self.conditional(draw, x_star, false)
    }

    fn conditional(&self, draw: &SfDraw<T>, x_star: &DesignMatrix<T>, noisy: bool) -> Result<(DMatrix<T>, DMatrix<T>)> {
        if x_star.p() != self.design.p() {
            return Err(Error::dim("prediction inputs differ in dimension from the design"));
        }
        let r = self.n_weights();
        let m = x_star.n();
        let mut mean = DMatrix::zeros(m, r);
        let mut var = DMatrix::zeros(m, r);
        for j in 0..r {
            let h = &draw.gps[j];
            let mut k = cov_symmetric(&self.design, h);
            if noisy {
                let noise = T::one() / (draw.lambda * self.gram_diag[j]);
                for i in 0..k.nrows() {
                    k[(i, i)] += noise;
                }
            }
            let chol = cholesky_escalating(&k, T::lit(crate::gp::JITTER) * mean_diagonal(&k))?;
            let cross = DMatrix::from_fn(self.design.n(), m, |i, t| {
                kernel(self.design.row(i), x_star.row(t), h).expect("dimensions checked")
            });
            let alpha = chol.solve(&self.gamma_hat.column(j).clone_owned());
            let v = chol
                .l_dirty()
                .solve_lower_triangular(&cross)
                .expect("Cholesky factors have a positive diagonal");
            for t in 0..m {
                mean[(t, j)] = cross.column(t).dot(&alpha);
                var[(t, j)] = (h.variance() - v.column(t).norm_squared()).max(T::zero());
            }
        }
        Ok((mean, var))
    }

    /// Effective-weight draws at each point: `coeffs[t]` is `r_x × D`, plus the
    /// per-draw noise standard deviation.
    pub(crate) fn weight_draws(&self, x_star: &DesignMatrix<T>, n_draws: usize) -> Result<(Vec<DMatrix<T>>, Vec<T>)> {
        let params = self.samples.thin(n_draws);
        if params.is_empty() {
            return Err(Error::Contract("model has no posterior draws".into()));
        }
        let r = self.n_weights();
        let m = x_star.n();
        let per_draw: Vec<(DMatrix<T>, T)> = params
            .par_iter()
            .enumerate()
            .map(|(d, p)| {
                let draw = self.draw_from_params(p);
                let (mean, var) = self.weight_conditional(&draw, x_star)?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0001);
                rng.set_stream(d as u64);
                let mut g = DMatrix::zeros(r, m);
                for t in 0..m {
                    for j in 0..r {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        g[(j, t)] = mean[(t, j)] + var[(t, j)].sqrt() * T::lit(z);
                    }
                }
                Ok((g, (T::one() / draw.lambda).sqrt()))
            })
            .collect::<Result<_>>()?;
        let dn = per_draw.len();
        let mut coeffs = vec![DMatrix::zeros(r, dn); m];
        let mut noise = Vec::with_capacity(dn);
        for (d, (g, sd)) in per_draw.into_iter().enumerate() {
            for (t, c) in coeffs.iter_mut().enumerate() {
                c.set_column(d, &g.column(t));
            }
            noise.push(sd);
        }
        Ok((coeffs, noise))
    }

    /// Predictive fields on the training grid at every row of `x_star`.
    pub fn predict_many(&self, x_star: &DesignMatrix<T>, n_draws: usize) -> Result<Vec<PredictionResult<T>>> {
        let basis = field_basis(&self.tucker)?;
        self.predict_with_basis(x_star, n_draws, basis, self.output_dims())
    }

    pub fn predict(&self, x_star: &[T], n_draws: usize) -> Result<PredictionResult<T>> {
        let mut v = self.predict_many(&DesignMatrix::single(x_star)?, n_draws)?;
        Ok(v.remove(0))
    }

    /// Prediction using a substitute field basis (for example one carried to
    /// another mesh).
    pub(crate) fn predict_with_basis(
        &self,
        x_star: &DesignMatrix<T>,
        n_draws: usize,
        basis: DMatrix<T>,
        dims: Vec<usize>,
    ) -> Result<Vec<PredictionResult<T>>> {
        let (coeffs, noise) = self.weight_draws(x_star, n_draws)?;
        coeffs
            .into_iter()
            .enumerate()
            .map(|(t, c)| {
                DrawSource {
                    dims: dims.clone(),
                    offset: Vec::new(),
                    basis: basis.clone(),
                    coeffs: c,
                    noise_sd: noise.clone(),
                    entry_scale: Vec::new(),
                    seed: noise_seed(self.seed, t),
                    transform: self.transform,
                }
                .summarize()
            })
            .collect()
    }

    /// Posterior mean length scale of each (weight, input) pair.
    pub fn lengthscale_means(&self) -> Vec<Vec<f64>> {
        let bank = self.bank();
        let mean = self.samples.posterior_mean();
        (0..bank.count)
            .map(|j| {
                let s = bank.offset + j * (bank.p + 1);
                mean[s + 1..s + 1 + bank.p].to_vec()
            })
            .collect()
    }
}

pub(crate) fn noise_seed(seed: u64, point: usize) -> u64 {
    // SplitMix64 finalizer over (seed, point)
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(point as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Starting values: precision from the empirical second moment of each weight,
/// unit-interval-sized length scales, and the Gamma posterior mean for the
/// noise precision (whose log-scale posterior SD is about `1/√a'`).
pub(crate) fn initial_point<T: Real>(
    bank: &GpBank,
    gamma: &DMatrix<T>,
    opts: &SfOptions,
    a_post: f64,
    b_post: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut init = Vec::with_capacity(bank.width() + 1);
    let mut scales = Vec::with_capacity(bank.width() + 1);
    for j in 0..bank.count {
        let col = gamma.column(j);
        let ms = col.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / col.len() as f64;
        init.push(if ms > 0.0 { 1.0 / ms } else { 1.0 });
        init.extend(std::iter::repeat_n(0.5, bank.p));
        scales.extend(std::iter::repeat_n(opts.mcmc.init_scale, bank.p + 1));
    }
    if opts.fixed_noise_precision.is_none() {
        init.push(a_post / b_post);
        scales.push(opts.mcmc.init_scale.min(2.4 / a_post.sqrt()));
    }
    (init, scales)
}
