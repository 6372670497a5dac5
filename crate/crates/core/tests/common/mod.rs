#![allow(dead_code)]

use mftensor::gp::DesignMatrix;
use mftensor::mcmc::McmcConfig;
use mftensor::tensor::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn quick_mcmc(seed: u64) -> McmcConfig {
    McmcConfig {
        n_chains: 2,
        n_iter: 600,
        burn_in: 300,
        seed,
        ..McmcConfig::default()
    }
}

pub fn uniform_design(n: usize, p: usize, seed: u64) -> DesignMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DesignMatrix::new((0..n).map(|_| (0..p).map(|_| rng.random_range(0.0..1.0)).collect()).collect()).unwrap()
}

/// Field at `x`: `Σ_j g_j(x) B_j` with smooth `g_j` and fixed random `B_j`,
/// plus optional i.i.d. noise.
pub struct SmoothEnsemble {
    pub field_dims: [usize; 3],
    pub bases: Vec<Vec<f64>>,
}

impl SmoothEnsemble {
    pub fn new(field_dims: [usize; 3], n_terms: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = field_dims.iter().product();
        let bases = (0..n_terms).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        Self { field_dims, bases }
    }

    pub fn weight(j: usize, x: &[f64]) -> f64 {
        let s: f64 = x.iter().enumerate().map(|(d, v)| v * (1.0 + d as f64 * 0.5)).sum();
        match j {
            0 => 2.0 + s,
            1 => (3.0 * s).sin(),
            2 => (2.0 * s).cos() * 0.7,
            _ => (s * (j as f64)).sin() * 0.5,
        }
    }

    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        let n = self.bases[0].len();
        let mut out = vec![0.0; n];
        for (j, b) in self.bases.iter().enumerate() {
            let w = Self::weight(j, x);
            for (o, v) in out.iter_mut().zip(b) {
                *o += w * v;
            }
        }
        out
    }

    pub fn ensemble(&self, design: &DesignMatrix<f64>, noise: f64, seed: u64) -> DenseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        for x in design.rows() {
            for v in self.field(x) {
                let e: f64 = rng.random_range(-1.0..1.0);
                values.push(v + noise * e);
            }
        }
        let [a, b, c] = self.field_dims;
        DenseTensor::new(vec![a, b, c, design.n()], values).unwrap()
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Two-fidelity toy: fields are `Σ_j g_j(x) φ_j(s) τ_j(m, y)` for smooth spatial
/// functions `φ_j`, evaluated on either mesh; the HF level adds `c · h(x) χ(s) τ_d`.
pub struct MfToy {
    pub n_m: usize,
    pub n_y: usize,
    pub temporal: Vec<Vec<f64>>,
    pub disc_temporal: Vec<f64>,
    pub disc_scale: f64,
}

pub fn grid_mesh(k: usize) -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for b in 0..k {
        for a in 0..k {
            pts.push(vec![a as f64 / (k - 1) as f64, b as f64 / (k - 1) as f64]);
        }
    }
    pts
}

impl MfToy {
    pub fn new(n_m: usize, n_y: usize, disc_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let temporal = (0..3).map(|_| (0..n_m * n_y).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let disc_temporal = (0..n_m * n_y).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { n_m, n_y, temporal, disc_temporal, disc_scale }
    }

    fn spatial(j: usize, s: &[f64]) -> f64 {
        match j {
            0 => 1.0 + 0.5 * s[0],
            1 => (2.0 * s[0] + s[1]).sin(),
            _ => (1.5 * s[1]).cos() * s[0],
        }
    }

    pub fn field(&self, x: &[f64], mesh: &[Vec<f64>], hf: bool) -> Vec<f64> {
        let ns = mesh.len();
        let mut out = vec![0.0; ns * self.n_m * self.n_y];
        for (j, tau) in self.temporal.iter().enumerate() {
            let w = SmoothEnsemble::weight(j, x);
            for (t, tv) in tau.iter().enumerate() {
                for (s, p) in mesh.iter().enumerate() {
                    out[s + ns * t] += w * Self::spatial(j, p) * tv;
                }
            }
        }
        if hf {
            let h = self.disc_scale * (1.0 + x.iter().sum::<f64>()).sqrt();
            for (t, tv) in self.disc_temporal.iter().enumerate() {
                for (s, p) in mesh.iter().enumerate() {
                    out[s + ns * t] += h * (p[0] * p[1] - 0.25) * tv;
                }
            }
        }
        out
    }

    pub fn ensemble(&self, design: &DesignMatrix<f64>, mesh: &[Vec<f64>], hf: bool, noise: f64, seed: u64) -> DenseTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        for x in design.rows() {
            for v in self.field(x, mesh, hf) {
                let e: f64 = rng.random_range(-1.0..1.0);
                values.push(v + noise * e);
            }
        }
        DenseTensor::new(vec![mesh.len(), self.n_m, self.n_y, design.n()], values).unwrap()
    }
}
