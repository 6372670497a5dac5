//! Naive comparator: an independent GP over the design inputs at every
//! spatiotemporal coordinate, fitted by maximum marginal likelihood.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cov_matrix, cov_symmetric, mvn_logpdf, DesignMatrix, GpHyperparams};
use crate::linalg::{cholesky_escalating, mean_diagonal};
use crate::predict::{gaussian_prediction, PredictionResult};
use crate::scalar::Real;
use crate::tensor::DenseTensor;
use crate::transform::TransformSpec;

const LOG_BOUND: f64 = 6.907_755_278_982_137; // ln(1e3)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaiveOptions {
    pub n_starts: usize,
    pub max_iter: u64,
    pub seed: u64,
}

impl Default for NaiveOptions {
    fn default() -> Self {
        Self {
            n_starts: 5,
            max_iter: 200,
            seed: 7,
        }
    }
}

/// Per-coordinate fit. Responses are standardized before fitting; `center`
/// and `scale` undo that.
#[derive(Debug, Clone, PartialEq)]
pub enum CoordFit<T> {
    /// Responses constant across inputs: predicted exactly, zero variance.
    Degenerate { value: T },
    Fitted {
        center: T,
        scale: T,
        hyper: GpHyperparams<T>,
        nugget: T,
    },
    /// Optimizer failed; predictions fall back to the standardized prior.
    Fallback { center: T, scale: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveGpModel<T: Real> {
    pub field_dims: Vec<usize>,
    pub design: DesignMatrix<T>,
    /// `n_x × n_coords` training responses.
    pub responses: DMatrix<T>,
    pub fits: Vec<CoordFit<T>>,
    pub warnings: Vec<String>,
    /// Inverted on every predictive draw.
    pub transform: Option<TransformSpec<T>>,
}

struct Objective<'a> {
    design: &'a DesignMatrix<f64>,
    y: &'a DVector<f64>,
}

impl Objective<'_> {
    fn unpack(&self, theta: &[f64]) -> (GpHyperparams<f64>, f64) {
        let p = self.design.p();
        (
            GpHyperparams {
                precision: theta[0].exp(),
                length_scales: theta[1..=p].iter().map(|v| v.exp()).collect(),
            },
            theta[p + 1].exp(),
        )
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        if theta.iter().any(|v| !v.is_finite() || v.abs() > LOG_BOUND) {
            return Ok(f64::MAX);
        }
        let (h, nugget) = self.unpack(theta);
        let mut k = cov_symmetric(self.design, &h);
        for i in 0..k.nrows() {
            k[(i, i)] += nugget;
        }
        Ok(match mvn_logpdf(self.y, &DVector::zeros(self.y.len()), &k) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::MAX,
        })
    }
}

fn starts(p: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![{
        let mut s = vec![0.0; p + 2];
        s[1..=p].fill(0.5f64.ln());
        s[p + 1] = 1e-2f64.ln();
        s
    }];
    while out.len() < n {
        out.push((0..p + 2).map(|_| rng.random_range(-3.0..3.0)).collect());
    }
    out
}

fn fit_one(design: &DesignMatrix<f64>, y: &[f64], opts: &NaiveOptions, inits: &[Vec<f64>]) -> (CoordFit<f64>, Option<String>) {
    let n = y.len() as f64;
    let center = y.iter().sum::<f64>() / n;
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-12 * center.abs().max(1.0) {
        return (CoordFit::Degenerate { value: y[0] }, None);
    }
    let scale = (y.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n).sqrt();
    let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - center) / scale));
    let obj = Objective { design, y: &ys };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for x0 in inits {
        let mut simplex = vec![x0.clone()];
        for i in 0..x0.len() {
            let mut v = x0.clone();
            v[i] += 0.5;
            simplex.push(v);
        }
        let Ok(solver) = NelderMead::new(simplex).with_sd_tolerance(1e-8) else {
            continue;
        };
        let Ok(res) = Executor::new(Objective { design, y: &ys }, solver)
            .configure(|s| s.max_iters(opts.max_iter))
            .run()
        else {
            continue;
        };
        let st = res.state();
        if let Some(p) = st.best_param.clone() {
            if st.best_cost < f64::MAX && best.as_ref().is_none_or(|b| st.best_cost < b.0) {
                best = Some((st.best_cost, p));
            }
        }
    }
    match best {
        Some((_, theta)) => {
            let (hyper, nugget) = obj.unpack(&theta);
            (CoordFit::Fitted { center, scale, hyper, nugget }, None)
        }
        None => (
            CoordFit::Fallback { center, scale },
            Some("marginal-likelihood optimization failed from every start".into()),
        ),
    }
}

impl<T: Real> NaiveGpModel<T> {
    /// Fits one GP per coordinate of the first three modes of `z`.
    pub fn fit(z: &DenseTensor<T>, design: &DesignMatrix<T>, opts: &NaiveOptions) -> Result<Self> {
        if z.order() != 4 || z.dims()[3] != design.n() {
            return Err(Error::dim(format!(
                "ensemble dims {:?} do not match {} design rows",
                z.dims(),
                design.n()
            )));
        }
        if design.n() < 2 {
            return Err(Error::Domain("the naive GP needs at least two runs".into()));
        }
        if opts.n_starts == 0 {
            return Err(Error::Config("n_starts must be positive".into()));
        }
        let d64 = DesignMatrix::from_flat(design.n(), design.p(), design.rows().flatten().map(|v| v.as_f64()).collect())?;
        // n_coords × n_x, so each coordinate's responses are contiguous in memory
        let resp = z.unfold(3)?;
        let n_coords = resp.ncols();
        let inits = starts(design.p(), opts.n_starts, opts.seed);
        let results: Vec<(CoordFit<f64>, Option<String>)> = (0..n_coords)
            .into_par_iter()
            .map(|c| {
                let y: Vec<f64> = resp.column(c).iter().map(|v| v.as_f64()).collect();
                fit_one(&d64, &y, opts, &inits)
            })
            .collect();
        let mut fits = Vec::with_capacity(n_coords);
        let mut warnings = Vec::new();
        for (c, (f, w)) in results.into_iter().enumerate() {
            if let Some(w) = w {
                warnings.push(format!("coordinate {c}: {w}"));
            }
            fits.push(match f {
                CoordFit::Degenerate { value } => CoordFit::Degenerate { value: T::lit(value) },
                CoordFit::Fitted { center, scale, hyper, nugget } => CoordFit::Fitted {
                    center: T::lit(center),
                    scale: T::lit(scale),
                    hyper: GpHyperparams {
                        precision: T::lit(hyper.precision),
                        length_scales: hyper.length_scales.iter().map(|&v| T::lit(v)).collect(),
                    },
                    nugget: T::lit(nugget),
                },
                CoordFit::Fallback { center, scale } => CoordFit::Fallback {
                    center: T::lit(center),
                    scale: T::lit(scale),
                },
            });
        }
        Ok(Self {
            field_dims: z.dims()[..3].to_vec(),
            design: design.clone(),
            responses: resp,
            fits,
            warnings,
            transform: None,
        })
    }

    pub fn with_transform(mut self, t: Option<TransformSpec<T>>) -> Self {
        self.transform = t;
        self
    }

    pub fn n_degenerate(&self) -> usize {
        self.fits.iter().filter(|f| matches!(f, CoordFit::Degenerate { .. })).count()
    }

    /// Predictive mean and SD of coordinate `c` at `x_star` (SD includes the nugget).
    pub fn predict_coord(&self, c: usize, x_star: &DesignMatrix<T>) -> Result<(Vec<T>, Vec<T>)> {
        let m = x_star.n();
        match &self.fits[c] {
            CoordFit::Degenerate { value } => Ok((vec![*value; m], vec![T::zero(); m])),
            CoordFit::Fallback { center, scale } => Ok((vec![*center; m], vec![*scale; m])),
            CoordFit::Fitted { center, scale, hyper, nugget } => {
                let mut k = cov_symmetric(&self.design, hyper);
                for i in 0..k.nrows() {
                    k[(i, i)] += *nugget;
                }
                let chol = cholesky_escalating(&k, T::lit(crate::gp::JITTER) * mean_diagonal(&k))?;
                let y = DVector::from_iterator(
                    self.design.n(),
                    self.responses.column(c).iter().map(|v| (*v - *center) / *scale),
                );
                let cross = cov_matrix(&self.design, x_star, hyper)?;
                let alpha = chol.solve(&y);
                let v = chol
                    .l_dirty()
                    .solve_lower_triangular(&cross)
                    .ok_or_else(|| Error::Factorization("triangular solve failed".into()))?;
                let mut mean = Vec::with_capacity(m);
                let mut sd = Vec::with_capacity(m);
                for t in 0..m {
                    mean.push(*center + *scale * cross.column(t).dot(&alpha));
                    let var = (hyper.variance() + *nugget - v.column(t).norm_squared()).max(T::zero());
                    sd.push(*scale * var.sqrt());
                }
                Ok((mean, sd))
            }
        }
    }

    /// Pointwise mean and SD fields at each row of `x_star`.
    pub fn predict_moments(&self, x_star: &DesignMatrix<T>) -> Result<Vec<(DenseTensor<T>, DenseTensor<T>)>> {
        if x_star.p() != self.design.p() {
            return Err(Error::dim("prediction inputs differ in dimension from the design"));
        }
        let per: Vec<(Vec<T>, Vec<T>)> = (0..self.fits.len())
            .into_par_iter()
            .map(|c| self.predict_coord(c, x_star))
            .collect::<Result<_>>()?;
        (0..x_star.n())
            .map(|t| {
                let mean = per.iter().map(|(m, _)| m[t]).collect();
                let sd = per.iter().map(|(_, s)| s[t]).collect();
                Ok((
                    DenseTensor::new(self.field_dims.clone(), mean)?,
                    DenseTensor::new(self.field_dims.clone(), sd)?,
                ))
            })
            .collect()
    }

    pub fn predict_many(&self, x_star: &DesignMatrix<T>, n_draws: usize, seed: u64) -> Result<Vec<PredictionResult<T>>> {
        self.predict_moments(x_star)?
            .into_iter()
            .enumerate()
            .map(|(t, (m, s))| gaussian_prediction(m, s, n_draws, crate::sf::noise_seed(seed, t), self.transform))
            .collect()
    }

    pub fn predict(&self, x_star: &[T], n_draws: usize, seed: u64) -> Result<PredictionResult<T>> {
        let mut v = self.predict_many(&DesignMatrix::single(x_star)?, n_draws, seed)?;
        Ok(v.remove(0))
    }
}
