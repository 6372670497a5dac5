//! Componentwise adaptive random-walk Metropolis–Hastings.
//!
//! Every sampled quantity is positive and is moved on the log scale, one
//! component at a time in a fixed order. Proposal scales follow a
//! Robbins–Monro rule toward `target_accept` during burn-in and are frozen
//! afterwards. Chains run in parallel with independent ChaCha streams.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub target_accept: f64,
    /// Iterations between scale updates; 0 disables adaptation.
    pub adapt_window: usize,
    /// Initial log-scale proposal standard deviation.
    pub init_scale: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            n_iter: 4000,
            burn_in: 2000,
            seed: 20240501,
            target_accept: 0.30,
            adapt_window: 50,
            init_scale: 0.5,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Config("mcmc.n_chains must be at least 1".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "mcmc.burn_in ({}) must be smaller than mcmc.n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("mcmc.target_accept must lie in (0, 1)".into()));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::Config("mcmc.init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.n_iter - self.burn_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    /// `|N(0, scale²)|`
    FoldedNormal { scale: f64 },
    LogNormal { mu: f64, sigma: f64 },
    /// Shape/rate parameterization.
    Gamma { shape: f64, rate: f64 },
}

impl Prior {
    pub fn logpdf(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain(format!("prior evaluated at non-positive value {x}")));
        }
        Ok(match *self {
            Prior::FoldedNormal { scale } => {
                std::f64::consts::LN_2 - 0.5 * LN_2PI - scale.ln() - 0.5 * (x / scale).powi(2)
            }
            Prior::LogNormal { mu, sigma } => {
                let z = (x.ln() - mu) / sigma;
                -x.ln() - sigma.ln() - 0.5 * LN_2PI - 0.5 * z * z
            }
            Prior::Gamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
        })
    }
}

/// Sum of prior log densities, parameter by parameter.
pub fn log_prior(priors: &[Prior], params: &[f64]) -> Result<f64> {
    if priors.len() != params.len() {
        return Err(Error::dim(format!("{} priors for {} parameters", priors.len(), params.len())));
    }
    priors.iter().zip(params).map(|(p, &x)| p.logpdf(x)).sum()
}

/// A log posterior density over positive parameters, with cached state so a
/// single-component change can be re-evaluated cheaply.
///
/// `evaluate` and `update` may return [`Error::Factorization`], which the
/// sampler treats as zero density (the proposal is rejected). Any other error
/// aborts the chain.
pub trait LogTarget: Sync {
    type State: Clone + Send;

    fn names(&self) -> Vec<String>;

    fn evaluate(&self, params: &[f64]) -> Result<Self::State>;

    fn value(&self, state: &Self::State) -> f64;

    /// State after `params[changed]` moved; `state` matches the previous params.
    fn update(&self, state: &Self::State, params: &[f64], changed: usize) -> Result<Self::State> {
        let _ = (state, changed);
        self.evaluate(params)
    }

    /// Log-density difference `new − old` for a move of `changed`. Targets
    /// whose value is a sum of terms can override this to add up only the
    /// terms that depend on `changed`.
    fn delta(&self, old: &Self::State, new: &Self::State, changed: usize) -> f64 {
        let _ = changed;
        self.value(new) - self.value(old)
    }
}

/// Wraps a plain closure as a [`LogTarget`].
pub struct FnTarget<F> {
    names: Vec<String>,
    f: F,
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> FnTarget<F> {
    pub fn new(names: Vec<String>, f: F) -> Self {
        Self { names, f }
    }
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> LogTarget for FnTarget<F> {
    type State = f64;

    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn evaluate(&self, params: &[f64]) -> Result<f64> {
        (self.f)(params)
    }

    fn value(&self, state: &f64) -> f64 {
        *state
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// `draws[chain][i][param]`, natural (positive) scale.
    pub draws: Vec<Vec<Vec<f64>>>,
    /// Post-burn-in acceptance rate per chain.
    pub acceptance: Vec<f64>,
    /// Proposal standard deviations (log scale) at the end of each chain.
    pub scales: Vec<Vec<f64>>,
    pub rhat: Vec<f64>,
}

impl PosteriorSamples {
    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_retained(&self) -> usize {
        self.draws.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// All retained draws, chain by chain.
    pub fn flat(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.draws.iter().flatten()
    }

    pub fn log_draws(&self) -> Vec<Vec<Vec<f64>>> {
        self.draws
            .iter()
            .map(|c| c.iter().map(|d| d.iter().map(|v| v.ln()).collect()).collect())
            .collect()
    }

    pub fn posterior_mean(&self) -> Vec<f64> {
        let n = self.n_retained().max(1) as f64;
        let mut m = vec![0.0; self.n_params()];
        for d in self.flat() {
            for (a, v) in m.iter_mut().zip(d) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// `n` draws evenly spaced through the pooled retained draws (all of
    /// them when fewer are available).
    pub fn thin(&self, n: usize) -> Vec<Vec<f64>> {
        let all: Vec<&Vec<f64>> = self.flat().collect();
        let total = all.len();
        if n == 0 || total == 0 {
            return Vec::new();
        }
        if n >= total {
            return all.into_iter().cloned().collect();
        }
        (0..n).map(|i| all[i * total / n].clone()).collect()
    }

    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NAN, f64::max)
    }

    /// Names of parameters whose split-R̂ exceeds `threshold`.
    pub fn flagged(&self, threshold: f64) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.rhat)
            .filter(|(_, r)| !(**r <= threshold))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// CSV with header `chain,iteration,<names…>`; `iteration` counts retained draws.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (c, chain) in self.draws.iter().enumerate() {
            for (i, d) in chain.iter().enumerate() {
                let mut rec = vec![c.to_string(), i.to_string()];
                rec.extend(d.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads draws written by [`write_csv`](Self::write_csv). Acceptance rates
    /// and scales are not part of the CSV and come back empty; R̂ is recomputed.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "chain" || &header[1] != "iteration" {
            return Err(Error::Format("posterior CSV must start with chain,iteration".into()));
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut draws: Vec<Vec<Vec<f64>>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let chain: usize = rec[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad chain index {:?}", &rec[0])))?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != names.len() {
                return Err(Error::Format("ragged posterior CSV row".into()));
            }
            if chain >= draws.len() {
                draws.resize(chain + 1, Vec::new());
            }
            draws[chain].push(vals);
        }
        let rhat = split_rhat_all(&draws).unwrap_or_else(|_| vec![f64::NAN; names.len()]);
        Ok(Self {
            names,
            draws,
            acceptance: Vec::new(),
            scales: Vec::new(),
            rhat,
        })
    }

    pub fn diagnostics_json(&self) -> serde_json::Value {
        let per_param: serde_json::Map<String, serde_json::Value> = self
            .names
            .iter()
            .zip(&self.rhat)
            .map(|(n, r)| (n.clone(), json_number(*r)))
            .collect();
        serde_json::json!({
            "acceptance": self.acceptance,
            "rhat": per_param,
            "max_rhat": json_number(self.max_rhat()),
            "rhat_flagged": self.flagged(1.1),
            "retained_draws": self.n_retained(),
        })
    }

    pub fn write_diagnostics(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.diagnostics_json())?;
        writeln!(f)?;
        Ok(())
    }
}

fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}

/// Split-R̂ for one parameter across chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Diagnostic("split-R̂ needs at least two chains".into()));
    }
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    if len < 4 {
        return Err(Error::Diagnostic(format!("split-R̂ needs ≥ 4 draws per chain, got {len}")));
    }
    let half = len / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..len];
        halves.push(&c[..half]);
        halves.push(&c[len - half..]);
    }
    let m = halves.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return Ok(if b > 0.0 { f64::INFINITY } else { 1.0 });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Split-R̂ of every parameter, computed on the log scale.
pub fn split_rhat_all(draws: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    let p = draws.first().and_then(|c| c.first()).map_or(0, Vec::len);
    (0..p)
        .map(|j| {
            let chains: Vec<Vec<f64>> = draws
                .iter()
                .map(|c| c.iter().map(|d| d[j].ln()).collect())
                .collect();
            split_rhat(&chains)
        })
        .collect()
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    acceptance: f64,
    scales: Vec<f64>,
}

fn eval_or_reject<S>(r: Result<S>) -> Result<Option<S>> {
    match r {
        Ok(s) => Ok(Some(s)),
        Err(Error::Factorization(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_chain<L: LogTarget>(
    target: &L,
    init: &[f64],
    init_scales: &[f64],
    cfg: &McmcConfig,
    chain: usize,
) -> Result<ChainOutput> {
    let fail = |iteration: usize, message: String| Error::Sampling {
        chain,
        iteration,
        message,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64 + 1);

    let dim = init.len();
    let mut params = init.to_vec();
    let mut state = target
        .evaluate(&params)
        .map_err(|e| fail(0, format!("initial point: {e}")))?;
    let v0 = target.value(&state);
    if !v0.is_finite() {
        return Err(fail(0, format!("log target is {v0} at the initial point")));
    }

    let mut log_scales: Vec<f64> = init_scales.iter().map(|s| s.ln()).collect();
    let mut window_accepts = vec![0usize; dim];
    let mut windows_done = 0usize;
    let mut accepted_after = 0usize;
    let mut draws = Vec::with_capacity(cfg.retained());

    for iter in 0..cfg.n_iter {
        for i in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let old = params[i];
            let log_old = old.ln();
            let log_new = log_old + log_scales[i].exp() * z;
            params[i] = log_new.exp();
            let proposal = if params[i] > 0.0 && params[i].is_finite() {
                eval_or_reject(target.update(&state, &params, i)).map_err(|e| fail(iter, e.to_string()))?
            } else {
                None
            };
            let accepted = match proposal {
                Some(new_state) => {
                    let d = target.delta(&state, &new_state, i);
                    if d.is_nan() {
                        return Err(fail(iter, format!("log target is NaN after moving {}", i)));
                    }
                    let log_alpha = d + (log_new - log_old);
                    if u.ln() < log_alpha {
                        state = new_state;
                        true
                    } else {
                        false
                    }
                }
                None => false,
            };
            if !accepted {
                params[i] = old;
            }
            if iter < cfg.burn_in {
                window_accepts[i] += accepted as usize;
            } else {
                accepted_after += accepted as usize;
            }
        }

        if cfg.adapt_window > 0 && iter < cfg.burn_in && (iter + 1) % cfg.adapt_window == 0 {
            windows_done += 1;
            let step = 1.0 / (windows_done as f64).sqrt();
            for (ls, acc) in log_scales.iter_mut().zip(window_accepts.iter_mut()) {
                let rate = *acc as f64 / cfg.adapt_window as f64;
                *ls += step * (rate - cfg.target_accept);
                *acc = 0;
            }
        }
        if iter >= cfg.burn_in {
            draws.push(params.clone());
        }
    }

    let acceptance = if dim == 0 {
        0.0
    } else {
        accepted_after as f64 / (cfg.retained() * dim) as f64
    };
    Ok(ChainOutput {
        draws,
        acceptance,
        scales: log_scales.iter().map(|l| l.exp()).collect(),
    })
}

/// Runs `cfg.n_chains` chains from `init` (natural scale). `init_scales`
/// gives per-parameter initial proposal standard deviations on the log scale;
/// `None` uses `cfg.init_scale` for all.
pub fn run_chains<L: LogTarget>(
    target: &L,
    init: &[f64],
    init_scales: Option<&[f64]>,
    cfg: &McmcConfig,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let names = target.names();
    if names.len() != init.len() {
        return Err(Error::dim(format!("{} names for {} initial values", names.len(), init.len())));
    }
    if let Some(bad) = init.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("initial values must be positive, got {bad}")));
    }
    let scales = match init_scales {
        Some(s) if s.len() != init.len() => return Err(Error::dim("one initial scale per parameter")),
        Some(s) => s.to_vec(),
        None => vec![cfg.init_scale; init.len()],
    };
    let outputs: Vec<ChainOutput> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, init, &scales, cfg, c))
        .collect::<Result<_>>()?;
    let mut draws = Vec::with_capacity(outputs.len());
    let mut acceptance = Vec::with_capacity(outputs.len());
    let mut final_scales = Vec::with_capacity(outputs.len());
    for o in outputs {
        draws.push(o.draws);
        acceptance.push(o.acceptance);
        final_scales.push(o.scales);
    }
    let rhat = match split_rhat_all(&draws) {
        Ok(r) => r,
        Err(Error::Diagnostic(_)) => vec![f64::NAN; names.len()],
        Err(e) => return Err(e),
    };
    Ok(PosteriorSamples {
        names,
        draws,
        acceptance,
        scales: final_scales,
        rhat,
    })
}
