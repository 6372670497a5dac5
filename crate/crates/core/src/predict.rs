//! Posterior predictive draws and their pointwise summaries.
//!
//! Field draws are never stored whole. A [`DrawSource`] keeps them in factored
//! form, `offset + basis · coeffs[:, d] + noise`, and materializes fixed-size
//! chunks of entries on demand. Each chunk has its own ChaCha stream, so the
//! result does not depend on how chunks are scheduled across threads.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;
use crate::transform::TransformSpec;

/// Entries per materialized chunk.
pub const CHUNK: usize = 4096;

/// Draws required before interval coverage is considered meaningful.
pub const MIN_DRAWS_FOR_COVERAGE: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DrawSource<T> {
    pub dims: Vec<usize>,
    /// Per-entry constant added to every draw (length `n` or empty).
    pub offset: Vec<T>,
    /// `n × q`
    pub basis: DMatrix<T>,
    /// `q × D`
    pub coeffs: DMatrix<T>,
    /// Noise standard deviation per draw.
    pub noise_sd: Vec<T>,
    /// Optional per-entry multiplier of the noise (length `n` or empty).
    pub entry_scale: Vec<T>,
    pub seed: u64,
    /// Applied in the inverse direction to every materialized value.
    pub transform: Option<TransformSpec<T>>,
}

impl<T: Real> DrawSource<T> {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_draws(&self) -> usize {
        self.noise_sd.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let d = self.n_draws();
        let ok = self.basis.nrows() == n
            && self.coeffs.nrows() == self.basis.ncols()
            && self.coeffs.ncols() == d
            && (self.offset.is_empty() || self.offset.len() == n)
            && (self.entry_scale.is_empty() || self.entry_scale.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::dim("inconsistent predictive draw components"))
        }
    }

    /// Draws for entries `start..start+len` as a `len × D` matrix. `start`
    /// must be a multiple of [`CHUNK`] so the noise stream lines up.
    fn chunk(&self, chunk_index: usize) -> Result<DMatrix<T>> {
        let n = self.len();
        let start = chunk_index * CHUNK;
        let len = CHUNK.min(n - start);
        let d = self.n_draws();
        let mut out = if self.basis.ncols() > 0 {
            self.basis.rows(start, len) * &self.coeffs
        } else {
            DMatrix::zeros(len, d)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chunk_index as u64);
        for k in 0..d {
            let sd = self.noise_sd[k];
            for e in 0..len {
                let z: f64 = StandardNormal.sample(&mut rng);
                let scale = if self.entry_scale.is_empty() {
                    sd
                } else {
                    sd * self.entry_scale[start + e]
                };
                let base = if self.offset.is_empty() {
                    T::zero()
                } else {
                    self.offset[start + e]
                };
                out[(e, k)] += base + scale * T::lit(z);
            }
        }
        if let Some(t) = &self.transform {
            for v in out.iter_mut() {
                *v = t.inverse(*v)?;
            }
        }
        Ok(out)
    }

    fn n_chunks(&self) -> usize {
        self.len().div_ceil(CHUNK)
    }

    /// All draws as tensors. Memory is `n × D`; meant for small problems.
    pub fn materialize(&self) -> Result<Vec<DenseTensor<T>>> {
        self.validate()?;
        let n = self.len();
        let d = self.n_draws();
        let mut values = vec![Vec::with_capacity(n); d];
        for c in 0..self.n_chunks() {
            let m = self.chunk(c)?;
            for (k, v) in values.iter_mut().enumerate() {
                v.extend(m.column(k).iter().copied());
            }
        }
        values
            .into_iter()
            .map(|v| DenseTensor::new(self.dims.clone(), v))
            .collect()
    }

    pub fn summarize(&self) -> Result<PredictionResult<T>> {
        self.validate()?;
        let d = self.n_draws();
        if d == 0 {
            return Err(Error::Degenerate("no predictive draws".into()));
        }
        let parts: Vec<[Vec<T>; 4]> = (0..self.n_chunks())
            .into_par_iter()
            .map(|c| {
                let m = self.chunk(c)?;
                let mut stats: [Vec<T>; 4] = Default::default();
                let mut buf = vec![T::zero(); d];
                for e in 0..m.nrows() {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b = m[(e, k)];
                    }
                    let (mean, sd) = mean_sd(&buf);
                    stats[0].push(mean);
                    stats[1].push(sd);
                    stats[2].push(quantile_in_place(&mut buf, 0.025));
                    stats[3].push(quantile_in_place(&mut buf, 0.975));
                }
                Ok(stats)
            })
            .collect::<Result<_>>()?;
        let mut cols: [Vec<T>; 4] = Default::default();
        for p in parts {
            for (c, v) in cols.iter_mut().zip(p) {
                c.extend(v);
            }
        }
        let [mean, sd, lower, upper] = cols;
        Ok(PredictionResult {
            mean: DenseTensor::new(self.dims.clone(), mean)?,
            sd: DenseTensor::new(self.dims.clone(), sd)?,
            lower: DenseTensor::new(self.dims.clone(), lower)?,
            upper: DenseTensor::new(self.dims.clone(), upper)?,
            n_draws: d,
            source: Some(self.clone()),
        })
    }
}

/// Mean and sample standard deviation (`D − 1` denominator).
pub fn mean_sd<T: Real>(v: &[T]) -> (T, T) {
    let n = T::lit(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    if v.len() < 2 {
        return (mean, T::zero());
    }
    let ss = v.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>();
    (mean, (ss / (n - T::one())).sqrt())
}

/// Linear interpolation between order statistics (the usual "type 7"
/// definition). Reorders `v`.
pub fn quantile_in_place<T: Real>(v: &mut [T], p: f64) -> T {
    let n = v.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = T::lit(h - lo as f64);
    let cmp = |a: &T, b: &T| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal);
    let (_, &mut a, rest) = v.select_nth_unstable_by(lo, cmp);
    if lo + 1 >= n || frac == T::zero() {
        return a;
    }
    let b = rest.iter().copied().fold(rest[0], |m, x| if x < m { x } else { m });
    a + frac * (b - a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult<T> {
    pub mean: DenseTensor<T>,
    pub sd: DenseTensor<T>,
    /// Pointwise 2.5% quantile.
    pub lower: DenseTensor<T>,
    /// Pointwise 97.5% quantile.
    pub upper: DenseTensor<T>,
    pub n_draws: usize,
    /// Factored draws, when the predictor is sample based.
    pub source: Option<DrawSource<T>>,
}

impl<T: Real> PredictionResult<T> {
    pub fn dims(&self) -> &[usize] {
        self.mean.dims()
    }

    pub fn draws(&self) -> Result<Vec<DenseTensor<T>>> {
        match &self.source {
            Some(s) => s.materialize(),
            None => Err(Error::Contract("prediction carries no draws".into())),
        }
    }
}

/// Gaussian predictive fields given per-entry mean and SD, carried as
/// independent draws so every emulator is scored the same way.
pub fn gaussian_prediction<T: Real>(
    mean: DenseTensor<T>,
    sd: DenseTensor<T>,
    n_draws: usize,
    seed: u64,
    transform: Option<TransformSpec<T>>,
) -> Result<PredictionResult<T>> {
    if mean.dims() != sd.dims() {
        return Err(Error::dim("mean and SD tensors differ in shape"));
    }
    let source = DrawSource {
        dims: mean.dims().to_vec(),
        offset: mean.values().to_vec(),
        basis: DMatrix::zeros(mean.len(), 0),
        coeffs: DMatrix::zeros(0, n_draws),
        noise_sd: vec![T::one(); n_draws],
        entry_scale: sd.values().to_vec(),
        seed,
        transform,
    };
    source.summarize()
}
