//! Synthetic two-fidelity study: maximin Latin hypercube designs, a
//! Shubert-style LF simulator on a coarse grid, and an HF simulator that
//! evaluates the same physics on a finer grid plus an additive discrepancy.
//!
//! Inputs live in `[0, 1]^p`; only `x_1` and `x_2` matter, the rest are inert.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::DesignMatrix;
use crate::mf::{interpolate_bases, MeshCoords};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side length of the LF grid.
    pub grid_lf: usize,
    pub grid_hf: usize,
    pub n_months: usize,
    pub n_years: usize,
    pub n_lf: usize,
    pub n_hf: usize,
    /// Held-out test inputs (HF runs used only for scoring).
    pub n_test: usize,
    pub p: usize,
    pub seed: u64,
    pub discrepancy_scale: f64,
    /// Random Latin hypercubes screened by the maximin criterion.
    pub lhs_candidates: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_lf: 25,
            grid_hf: 50,
            n_months: 12,
            n_years: 5,
            n_lf: 100,
            n_hf: 10,
            n_test: 100,
            p: 3,
            seed: 2024,
            discrepancy_scale: 1.0,
            lhs_candidates: 100,
        }
    }
}

impl SynthConfig {
    /// Smaller grids and designs with the same structure.
    pub fn reduced() -> Self {
        Self {
            grid_lf: 12,
            grid_hf: 24,
            n_lf: 40,
            n_hf: 6,
            n_test: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_lf < 2 || self.grid_hf < 2 {
            return bad("grids need at least 2 points per side");
        }
        if self.n_months == 0 || self.n_years == 0 {
            return bad("n_months and n_years must be positive");
        }
        if self.n_hf == 0 || self.n_hf > self.n_lf {
            return bad("need 1 <= n_hf <= n_lf");
        }
        if self.p < 2 {
            return bad("p must be at least 2 (x1 and x2 drive the simulators)");
        }
        if self.lhs_candidates == 0 {
            return bad("lhs_candidates must be positive");
        }
        if !(self.discrepancy_scale.is_finite() && self.discrepancy_scale >= 0.0) {
            return bad("discrepancy_scale must be finite and non-negative");
        }
        Ok(())
    }

    fn field_dims(&self, grid: usize) -> Vec<usize> {
        vec![grid * grid, self.n_months, self.n_years]
    }
}

/// One random Latin hypercube: each column holds one point per stratum
/// `[i/n, (i+1)/n)`.
pub fn plain_lhs(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DesignMatrix<f64> {
    let mut values = vec![0.0; n * p];
    let mut perm: Vec<usize> = (0..n).collect();
    for d in 0..p {
        perm.shuffle(rng);
        for (i, &k) in perm.iter().enumerate() {
            values[i * p + d] = (k as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    DesignMatrix::from_flat(n, p, values).expect("shape is consistent")
}

pub fn min_distance(d: &DesignMatrix<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..d.n() {
        for j in i + 1..d.n() {
            let s: f64 = d.row(i).iter().zip(d.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(s);
        }
    }
    best.sqrt()
}

/// The candidate with the largest minimum pairwise distance among
/// `n_candidates` random Latin hypercubes (the first wins ties).
pub fn lhs_maximin(n: usize, p: usize, seed: u64, n_candidates: usize) -> Result<DesignMatrix<f64>> {
    if n == 0 || p == 0 || n_candidates == 0 {
        return Err(Error::Domain("LHS needs n, p and n_candidates positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = plain_lhs(n, p, &mut rng);
    let mut best_d = min_distance(&best);
    for _ in 1..n_candidates {
        let c = plain_lhs(n, p, &mut rng);
        let d = min_distance(&c);
        if d > best_d {
            best = c;
            best_d = d;
        }
    }
    Ok(best)
}

/// Cell-centre coordinates of a `g × g` grid on the unit square, first
/// coordinate fastest.
pub fn grid_points(g: usize) -> Vec<Vec<f64>> {
    let mut pts = Vec::with_capacity(g * g);
    for b in 0..g {
        for a in 0..g {
            pts.push(vec![(a as f64 + 0.5) / g as f64, (b as f64 + 0.5) / g as f64]);
        }
    }
    pts
}

pub fn grid_mesh(g: usize) -> MeshCoords<f64> {
    MeshCoords::new(grid_points(g)).expect("grid points are distinct")
}

/// Two-term Shubert sum `Σ_{i=1,2} i cos((i+1) t + i)`.
fn shubert(t: f64) -> f64 {
    (2.0 * t + 1.0).cos() + 2.0 * (3.0 * t + 2.0).cos()
}

fn check_input(x: &[f64], cfg: &SynthConfig) -> Result<()> {
    if x.len() != cfg.p {
        return Err(Error::dim(format!("input has {} entries, config says p = {}", x.len(), cfg.p)));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!("input {x:?} outside the unit cube")));
    }
    Ok(())
}

fn season(m: usize, n_months: usize) -> f64 {
    std::f64::consts::TAU * m as f64 / n_months as f64
}

fn trend(y: usize, n_years: usize) -> f64 {
    if n_years > 1 {
        y as f64 / (n_years - 1) as f64
    } else {
        0.0
    }
}

fn lf_value(s: &[f64], m: usize, y: usize, x: &[f64], cfg: &SynthConfig) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let spatial = (1.0 + 0.8 * x1) * shubert(3.0 * s[0] + 1.5 * x1) * shubert(3.0 * s[1]) / 9.0;
    let seasonal = (0.4 + 0.6 * x2) * (season(m, cfg.n_months) + std::f64::consts::TAU * 0.3 * x2).sin() * (0.5 + s[0] * s[1]);
    let drift = 0.15 * trend(y, cfg.n_years) * (1.0 + x1 * x2);
    spatial + seasonal + drift
}

/// Unscaled discrepancy; the 0.3 keeps its Frobenius norm near a fifth of the
/// HF signal at `discrepancy_scale = 1`.
fn discrepancy_value(s: &[f64], m: usize, x: &[f64], cfg: &SynthConfig) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let bump = (-((s[0] - 0.3).powi(2) + (s[1] - 0.65).powi(2)) / 0.04).exp();
    let ridge = s[0] * (1.0 - s[1]);
    let c = season(m, cfg.n_months).cos();
    0.3 * ((2.0 * x1 - 1.0 + x2 * x2) * bump * (1.0 + 0.5 * c) + 1.5 * (x1 * x2 - 0.25) * ridge + 0.4 * (3.0 * x2).sin() * bump)
}

fn field(grid: usize, x: &[f64], cfg: &SynthConfig, hf: bool) -> Result<DenseTensor<f64>> {
    check_input(x, cfg)?;
    let pts = grid_points(grid);
    let ns = pts.len();
    let mut v = vec![0.0; ns * cfg.n_months * cfg.n_years];
    for y in 0..cfg.n_years {
        for m in 0..cfg.n_months {
            let base = ns * (m + cfg.n_months * y);
            for (i, s) in pts.iter().enumerate() {
                let mut val = lf_value(s, m, y, x, cfg);
                if hf && cfg.discrepancy_scale != 0.0 {
                    val += cfg.discrepancy_scale * discrepancy_value(s, m, x, cfg);
                }
                v[base + i] = val;
            }
        }
    }
    DenseTensor::new(cfg.field_dims(grid), v)
}

/// LF field on the coarse grid, shape `(grid_lf², n_months, n_years)`.
pub fn simulate_lf(x: &[f64], cfg: &SynthConfig) -> Result<DenseTensor<f64>> {
    field(cfg.grid_lf, x, cfg, false)
}

/// LF physics on the fine grid plus the scaled discrepancy.
pub fn simulate_hf(x: &[f64], cfg: &SynthConfig) -> Result<DenseTensor<f64>> {
    field(cfg.grid_hf, x, cfg, true)
}

/// Runs `sim` at every design row and stacks the fields along a fourth mode.
pub fn run_ensemble(
    design: &DesignMatrix<f64>,
    cfg: &SynthConfig,
    sim: fn(&[f64], &SynthConfig) -> Result<DenseTensor<f64>>,
) -> Result<DenseTensor<f64>> {
    let parts: Vec<DenseTensor<f64>> = design.rows().collect::<Vec<_>>().par_iter().map(|x| sim(x, cfg)).collect::<Result<_>>()?;
    DenseTensor::stack(&parts)
}

/// Spatial k-NN interpolation of a whole field from the LF to the HF grid.
pub fn interpolate_field(f: &DenseTensor<f64>, cfg: &SynthConfig, k: usize) -> Result<DenseTensor<f64>> {
    let d = f.dims();
    let m = f.unfold(0)?;
    let out: DMatrix<f64> = interpolate_bases(&m, &grid_mesh(cfg.grid_lf), &grid_mesh(cfg.grid_hf), k)?;
    DenseTensor::fold(&out, 0, &[cfg.grid_hf * cfg.grid_hf, d[1], d[2]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub lf_design: DesignMatrix<f64>,
    /// First `n_hf` rows of the LF design.
    pub hf_design: DesignMatrix<f64>,
    /// Absent when `n_test` is 0.
    pub test_design: Option<DesignMatrix<f64>>,
    pub z_lf: DenseTensor<f64>,
    pub z_hf: DenseTensor<f64>,
    /// HF runs at the test inputs.
    pub z_test: Option<DenseTensor<f64>>,
    pub lf_mesh: MeshCoords<f64>,
    pub hf_mesh: MeshCoords<f64>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let lf_design = lhs_maximin(cfg.n_lf, cfg.p, cfg.seed, cfg.lhs_candidates)?;
    let hf_design = lf_design.select(&(0..cfg.n_hf).collect::<Vec<_>>())?;
    let test_design = if cfg.n_test > 0 {
        Some(lhs_maximin(cfg.n_test, cfg.p, cfg.seed.wrapping_add(1), cfg.lhs_candidates)?)
    } else {
        None
    };
    let z_lf = run_ensemble(&lf_design, cfg, simulate_lf)?;
    let z_hf = run_ensemble(&hf_design, cfg, simulate_hf)?;
    let z_test = match &test_design {
        Some(d) => Some(run_ensemble(d, cfg, simulate_hf)?),
        None => None,
    };
    Ok(SynthData {
        lf_design,
        hf_design,
        test_design,
        z_lf,
        z_hf,
        z_test,
        lf_mesh: grid_mesh(cfg.grid_lf),
        hf_mesh: grid_mesh(cfg.grid_hf),
    })
}
