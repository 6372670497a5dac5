//! Scoring emulator predictions against HF runs: pointwise metrics, a
//! held-out test-set study, leave-one-out cross-validation, and CSV reports
//! aggregated by month, year and location.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{NaiveGpModel, NaiveOptions};
use crate::error::{Error, Result};
use crate::gp::DesignMatrix;
use crate::mcmc::McmcConfig;
use crate::mf::{discrepancy_ensemble, hf_effective_weights, interpolate_bases, MeshCoords, MfEmulator, MfOptions};
use crate::predict::{quantile_in_place, PredictionResult, MIN_DRAWS_FOR_COVERAGE};
use crate::sf::{field_basis_with, noise_seed, PriorConfig, SfEmulator, SfOptions};
use crate::tensor::DenseTensor;
use crate::transform::{Direction, TransformSpec};
use crate::tucker::{hooi, select_ranks, HooiConfig};

fn same_dims(a: &DenseTensor<f64>, b: &DenseTensor<f64>) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::dim(format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

/// Mean squared difference over all entries.
pub fn mse(pred_mean: &DenseTensor<f64>, truth: &DenseTensor<f64>) -> Result<f64> {
    same_dims(pred_mean, truth)?;
    if truth.is_empty() {
        return Err(Error::Degenerate("empty field".into()));
    }
    let s: f64 = pred_mean.values().iter().zip(truth.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / truth.len() as f64)
}

/// Mean pointwise SD divided by the emulator's output range.
pub fn sd_normalized(pred_sd: &DenseTensor<f64>, output_range: f64) -> Result<f64> {
    if !(output_range > 0.0) || !output_range.is_finite() {
        return Err(Error::Degenerate(format!("output range {output_range}")));
    }
    if pred_sd.is_empty() {
        return Err(Error::Degenerate("empty field".into()));
    }
    Ok(pred_sd.values().iter().sum::<f64>() / pred_sd.len() as f64 / output_range)
}

/// Fraction of entries whose truth lies inside the empirical 95% interval of
/// the draws.
pub fn coverage95(draws: &[DenseTensor<f64>], truth: &DenseTensor<f64>) -> Result<f64> {
    if draws.len() < MIN_DRAWS_FOR_COVERAGE {
        return Err(Error::Diagnostic(format!(
            "coverage needs at least {MIN_DRAWS_FOR_COVERAGE} draws, got {}",
            draws.len()
        )));
    }
    for d in draws {
        same_dims(d, truth)?;
    }
    let mut buf = vec![0.0; draws.len()];
    let mut hits = 0usize;
    for (e, &t) in truth.values().iter().enumerate() {
        for (b, d) in buf.iter_mut().zip(draws) {
            *b = d.values()[e];
        }
        let lo = quantile_in_place(&mut buf, 0.025);
        let hi = quantile_in_place(&mut buf, 0.975);
        if lo <= t && t <= hi {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmulatorKind {
    Lf,
    Hf,
    Mf,
    Naive,
}

impl EmulatorKind {
    pub const ALL: [EmulatorKind; 4] = [Self::Lf, Self::Hf, Self::Mf, Self::Naive];

    pub fn label(self) -> &'static str {
        match self {
            Self::Lf => "LF",
            Self::Hf => "HF",
            Self::Mf => "MF",
            Self::Naive => "Naive",
        }
    }
}

impl fmt::Display for EmulatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EmulatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lf" => Ok(Self::Lf),
            "hf" => Ok(Self::Hf),
            "mf" => Ok(Self::Mf),
            "naive" => Ok(Self::Naive),
            other => Err(Error::Config(format!("unknown emulator '{other}' (expected lf, hf, mf or naive)"))),
        }
    }
}

/// Comma-separated emulator list; duplicates are dropped and the result is in
/// canonical order.
pub fn parse_emulators(s: &str) -> Result<Vec<EmulatorKind>> {
    let mut v: Vec<EmulatorKind> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    v.sort();
    v.dedup();
    if v.is_empty() {
        return Err(Error::Config("no emulators requested".into()));
    }
    Ok(v)
}

/// Per-mode ranks, given directly or as explained-variance targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Explicit(Vec<usize>),
    Variance(Vec<f64>),
}

impl RankChoice {
    /// Explicit ranks are capped at the tensor's dims, so a fold that loses a
    /// design point still decomposes.
    pub fn resolve(&self, t: &DenseTensor<f64>) -> Result<Vec<usize>> {
        match self {
            Self::Explicit(r) => {
                if r.len() != t.order() {
                    return Err(Error::Config(format!("{} ranks for an order-{} tensor", r.len(), t.order())));
                }
                if r.contains(&0) {
                    return Err(Error::Config("ranks must be positive".into()));
                }
                Ok(r.iter().zip(t.dims()).map(|(&a, &d)| a.min(d)).collect())
            }
            Self::Variance(v) => select_ranks(t, v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub lf_ranks: RankChoice,
    pub hf_ranks: RankChoice,
    pub disc_ranks: RankChoice,
    pub mcmc: McmcConfig,
    pub priors: PriorConfig,
    pub hooi: HooiConfig,
    pub k_interp: usize,
    pub n_draws: usize,
    /// Keep the held-out input's LF run when fitting a LOO fold.
    pub keep_lf_heldout: bool,
    pub naive: NaiveOptions,
    /// When set, emulators are fitted on the forward-transformed data and
    /// scored on the original scale.
    pub transform: Option<TransformSpec<f64>>,
    /// Test inputs predicted per call.
    pub batch: usize,
    pub input_names: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lf_ranks: RankChoice::Explicit(vec![4, 3, 2, 4]),
            hf_ranks: RankChoice::Explicit(vec![4, 3, 2, 4]),
            disc_ranks: RankChoice::Explicit(vec![3, 3, 1, 4]),
            mcmc: McmcConfig::default(),
            priors: PriorConfig::default(),
            hooi: HooiConfig::default(),
            k_interp: 3,
            n_draws: 200,
            keep_lf_heldout: false,
            naive: NaiveOptions::default(),
            transform: None,
            batch: 8,
            input_names: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate()?;
        self.priors.validate()?;
        if let Some(t) = &self.transform {
            t.validate()?;
        }
        if self.k_interp == 0 || self.batch == 0 {
            return Err(Error::Config("k_interp and batch must be positive".into()));
        }
        if self.n_draws < MIN_DRAWS_FOR_COVERAGE {
            return Err(Error::Config(format!("n_draws must be at least {MIN_DRAWS_FOR_COVERAGE}")));
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn input_name(&self, d: usize) -> String {
        self.input_names
            .as_ref()
            .and_then(|v| v.get(d).cloned())
            .unwrap_or_else(|| format!("x{}", d + 1))
    }
}

/// Training data for a two-fidelity study, on the original scale.
#[derive(Debug, Clone, Copy)]
pub struct StudyData<'a> {
    pub z_lf: &'a DenseTensor<f64>,
    pub z_hf: &'a DenseTensor<f64>,
    pub x_lf: &'a DesignMatrix<f64>,
    pub x_hf: &'a DesignMatrix<f64>,
    pub lf_mesh: &'a MeshCoords<f64>,
    pub hf_mesh: &'a MeshCoords<f64>,
}

impl StudyData<'_> {
    fn check(&self) -> Result<()> {
        let (l, h) = (self.z_lf.dims(), self.z_hf.dims());
        if self.z_lf.order() != 4 || self.z_hf.order() != 4 {
            return Err(Error::dim("ensembles must be order 4"));
        }
        if l[3] != self.x_lf.n() || h[3] != self.x_hf.n() {
            return Err(Error::dim("design rows differ from ensemble sizes"));
        }
        if l[0] != self.lf_mesh.len() || h[0] != self.hf_mesh.len() {
            return Err(Error::dim("mesh sizes differ from spatial modes"));
        }
        if l[1..3] != h[1..3] {
            return Err(Error::dim("temporal modes differ between fidelities"));
        }
        if self.x_lf.p() != self.x_hf.p() {
            return Err(Error::dim("designs differ in input dimension"));
        }
        Ok(())
    }

    fn field_dims(&self) -> Vec<usize> {
        self.z_hf.dims()[..3].to_vec()
    }
}

/// Emulators fitted on one training set. Failures are kept per emulator.
pub struct FittedSet {
    pub lf: Option<SfEmulator<f64>>,
    lf_basis: Option<DMatrix<f64>>,
    pub hf: Option<SfEmulator<f64>>,
    pub mf: Option<MfEmulator<f64>>,
    pub naive: Option<NaiveGpModel<f64>>,
    pub failures: Vec<(EmulatorKind, String)>,
    field_dims: Vec<usize>,
}

impl FittedSet {
    pub fn fit(data: &StudyData<'_>, kinds: &[EmulatorKind], cfg: &EvalConfig) -> Result<Self> {
        data.check()?;
        let forward = |z: &DenseTensor<f64>| match &cfg.transform {
            Some(t) => t.apply_tensor(z, Direction::Forward),
            None => Ok(z.clone()),
        };
        let z_lf = forward(data.z_lf)?;
        let z_hf = forward(data.z_hf)?;
        let mut out = Self {
            lf: None,
            lf_basis: None,
            hf: None,
            mf: None,
            naive: None,
            failures: Vec::new(),
            field_dims: data.field_dims(),
        };
        let sf_opts = SfOptions {
            mcmc: cfg.mcmc.clone(),
            priors: cfg.priors.clone(),
            fixed_noise_precision: None,
        };
        let want = |k| kinds.contains(&k);

        if want(EmulatorKind::Lf) || want(EmulatorKind::Mf) {
            let fit = cfg.lf_ranks.resolve(&z_lf).and_then(|r| {
                let (t, _) = hooi(&z_lf, &r, cfg.hooi)?;
                SfEmulator::fit(&z_lf, data.x_lf, &t, &sf_opts)
            });
            match fit {
                Ok(lf) => {
                    let lf = lf.with_transform(cfg.transform);
                    if want(EmulatorKind::Mf) {
                        let mf_opts = MfOptions {
                            mcmc: cfg.mcmc.clone(),
                            priors: cfg.priors.clone(),
                            k_interp: cfg.k_interp,
                            hooi: cfg.hooi,
                        };
                        let mf = disc_ranks(&cfg.disc_ranks, &lf, &z_hf, data, cfg.k_interp).and_then(|r| {
                            MfEmulator::fit_with_lf(lf.clone(), &z_hf, data.x_hf, data.lf_mesh, data.hf_mesh, &r, &mf_opts)
                        });
                        match mf {
                            Ok(m) => out.mf = Some(m.with_transform(cfg.transform)),
                            Err(e) => out.failures.push((EmulatorKind::Mf, e.to_string())),
                        }
                    }
                    if want(EmulatorKind::Lf) {
                        let f = lf.tucker.factors();
                        match interpolate_bases(&f[0], data.lf_mesh, data.hf_mesh, cfg.k_interp)
                            .and_then(|us| field_basis_with(lf.tucker.core(), &us, &f[1], &f[2]))
                        {
                            Ok(b) => {
                                out.lf_basis = Some(b);
                                out.lf = Some(lf);
                            }
                            Err(e) => out.failures.push((EmulatorKind::Lf, e.to_string())),
                        }
                    }
                }
                Err(e) => {
                    for k in [EmulatorKind::Lf, EmulatorKind::Mf] {
                        if want(k) {
                            out.failures.push((k, format!("LF fit failed: {e}")));
                        }
                    }
                }
            }
        }
        if want(EmulatorKind::Hf) {
            let fit = cfg.hf_ranks.resolve(&z_hf).and_then(|r| {
                let (t, _) = hooi(&z_hf, &r, cfg.hooi)?;
                SfEmulator::fit(&z_hf, data.x_hf, &t, &sf_opts)
            });
            match fit {
                Ok(h) => out.hf = Some(h.with_transform(cfg.transform)),
                Err(e) => out.failures.push((EmulatorKind::Hf, e.to_string())),
            }
        }
        if want(EmulatorKind::Naive) {
            match NaiveGpModel::fit(&z_hf, data.x_hf, &cfg.naive) {
                Ok(n) => out.naive = Some(n.with_transform(cfg.transform)),
                Err(e) => out.failures.push((EmulatorKind::Naive, e.to_string())),
            }
        }
        out.failures.sort_by_key(|f| f.0);
        Ok(out)
    }

    pub fn has(&self, k: EmulatorKind) -> bool {
        match k {
            EmulatorKind::Lf => self.lf.is_some(),
            EmulatorKind::Hf => self.hf.is_some(),
            EmulatorKind::Mf => self.mf.is_some(),
            EmulatorKind::Naive => self.naive.is_some(),
        }
    }

    /// HF-mesh predictions at every row of `x`, with `seed` feeding the
    /// Gaussian draws of the naive baseline.
    pub fn predict(&self, k: EmulatorKind, x: &DesignMatrix<f64>, n_draws: usize, seed: u64) -> Result<Vec<PredictionResult<f64>>> {
        let missing = || Error::Contract(format!("{k} emulator was not fitted"));
        match k {
            EmulatorKind::Lf => {
                let lf = self.lf.as_ref().ok_or_else(missing)?;
                let basis = self.lf_basis.clone().ok_or_else(missing)?;
                lf.predict_with_basis(x, n_draws, basis, self.field_dims.clone())
            }
            EmulatorKind::Hf => self.hf.as_ref().ok_or_else(missing)?.predict_many(x, n_draws),
            EmulatorKind::Mf => self.mf.as_ref().ok_or_else(missing)?.predict_many(x, n_draws),
            EmulatorKind::Naive => self.naive.as_ref().ok_or_else(missing)?.predict_many(x, n_draws, seed),
        }
    }
}

/// Discrepancy ranks. Variance targets are applied to the discrepancy
/// ensemble itself, which needs the fitted LF emulator.
fn disc_ranks(
    choice: &RankChoice,
    lf: &SfEmulator<f64>,
    z_hf: &DenseTensor<f64>,
    data: &StudyData<'_>,
    k_interp: usize,
) -> Result<Vec<usize>> {
    match choice {
        RankChoice::Explicit(_) => choice.resolve(z_hf),
        RankChoice::Variance(v) => {
            let f = lf.tucker.factors();
            let us = interpolate_bases(&f[0], data.lf_mesh, data.hf_mesh, k_interp)?;
            let g = hf_effective_weights(lf, data.x_hf)?;
            let delta = discrepancy_ensemble(z_hf, lf.tucker.core(), &us, &f[1], &f[2], &g)?;
            select_ranks(&delta, v)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Sums {
    sq: f64,
    sd: f64,
    hits: f64,
    n: f64,
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        self.sq += o.sq;
        self.sd += o.sd;
        self.hits += o.hits;
        self.n += o.n;
    }

    fn metric(&self, range: f64) -> Metric {
        Metric {
            mse: self.sq / self.n,
            sd: self.sd / self.n / range,
            coverage: self.hits / self.n,
        }
    }
}

/// Per-bucket sums for one scored prediction.
#[derive(Debug, Clone, PartialEq)]
struct PointStats {
    point: usize,
    total: Sums,
    loc: Vec<Sums>,
    month: Vec<Sums>,
    year: Vec<Sums>,
    min_mean: f64,
    max_mean: f64,
}

fn point_stats(point: usize, pred: &PredictionResult<f64>, truth: &DenseTensor<f64>) -> Result<PointStats> {
    same_dims(&pred.mean, truth)?;
    if pred.n_draws < MIN_DRAWS_FOR_COVERAGE {
        return Err(Error::Diagnostic(format!(
            "coverage needs at least {MIN_DRAWS_FOR_COVERAGE} draws, got {}",
            pred.n_draws
        )));
    }
    let d = truth.dims();
    if d.len() != 3 {
        return Err(Error::dim("scored fields must be (location, month, year)"));
    }
    let (ns, nm) = (d[0], d[1]);
    let mut s = PointStats {
        point,
        total: Sums::default(),
        loc: vec![Sums::default(); d[0]],
        month: vec![Sums::default(); d[1]],
        year: vec![Sums::default(); d[2]],
        min_mean: f64::INFINITY,
        max_mean: f64::NEG_INFINITY,
    };
    let (m, sd, lo, hi) = (pred.mean.values(), pred.sd.values(), pred.lower.values(), pred.upper.values());
    for (e, &t) in truth.values().iter().enumerate() {
        let err = m[e] - t;
        let v = Sums {
            sq: err * err,
            sd: sd[e],
            hits: if lo[e] <= t && t <= hi[e] { 1.0 } else { 0.0 },
            n: 1.0,
        };
        s.total.add(&v);
        s.loc[e % ns].add(&v);
        s.month[(e / ns) % nm].add(&v);
        s.year[e / (ns * nm)].add(&v);
        s.min_mean = s.min_mean.min(m[e]);
        s.max_mean = s.max_mean.max(m[e]);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mse: f64,
    /// Mean predictive SD over the emulator's output range.
    pub sd: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    /// Test input (or LOO fold) index.
    pub point: usize,
    pub mse: f64,
    pub sd: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub emulator: EmulatorKind,
    pub overall: Metric,
    pub points: Vec<PointMetrics>,
    pub by_month: Vec<Metric>,
    pub by_year: Vec<Metric>,
    pub by_location: Vec<Metric>,
    /// Range of the predictive means used to normalize the SD.
    pub output_range: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Points (or folds) that could not be scored, with the reason.
    pub failures: Vec<(usize, String)>,
}

impl MetricsReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    fn build(
        emulator: EmulatorKind,
        stats: Vec<PointStats>,
        failures: Vec<(usize, String)>,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        let first = stats
            .first()
            .ok_or_else(|| Error::Degenerate(format!("no scored points for {emulator}")))?;
        let lo = stats.iter().map(|s| s.min_mean).fold(f64::INFINITY, f64::min);
        let hi = stats.iter().map(|s| s.max_mean).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(Error::Degenerate(format!("{emulator} predictive means have zero range")));
        }
        let mut total = Sums::default();
        let mut loc = vec![Sums::default(); first.loc.len()];
        let mut month = vec![Sums::default(); first.month.len()];
        let mut year = vec![Sums::default(); first.year.len()];
        let mut points = Vec::with_capacity(stats.len());
        for s in &stats {
            total.add(&s.total);
            for (a, b) in loc.iter_mut().zip(&s.loc) {
                a.add(b);
            }
            for (a, b) in month.iter_mut().zip(&s.month) {
                a.add(b);
            }
            for (a, b) in year.iter_mut().zip(&s.year) {
                a.add(b);
            }
            let m = s.total.metric(range);
            points.push(PointMetrics {
                point: s.point,
                mse: m.mse,
                sd: m.sd,
                coverage: m.coverage,
            });
        }
        let agg = |v: &[Sums]| v.iter().map(|s| s.metric(range)).collect();
        Ok(Self {
            emulator,
            overall: total.metric(range),
            points,
            by_month: agg(&month),
            by_year: agg(&year),
            by_location: agg(&loc),
            output_range: range,
            seed,
            config_hash,
            failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthscaleRow {
    pub emulator: EmulatorKind,
    /// `LF` or `discrepancy`.
    pub component: String,
    /// 1-based effective-weight index.
    pub weight: usize,
    pub input: String,
    pub mean: f64,
}

fn lengthscale_rows(mf: &MfEmulator<f64>, cfg: &EvalConfig) -> Vec<LengthscaleRow> {
    let (lf, disc) = mf.lengthscale_means();
    let mut rows = Vec::new();
    for (component, table) in [("LF", lf), ("discrepancy", disc)] {
        for (j, ls) in table.iter().enumerate() {
            for (d, &v) in ls.iter().enumerate() {
                rows.push(LengthscaleRow {
                    emulator: EmulatorKind::Mf,
                    component: component.to_string(),
                    weight: j + 1,
                    input: cfg.input_name(d),
                    mean: v,
                });
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub reports: Vec<MetricsReport>,
    pub lengthscales: Vec<LengthscaleRow>,
    /// Emulators that could not be fitted at all, with the reason.
    pub fit_failures: Vec<(EmulatorKind, String)>,
}

impl StudyReport {
    pub fn get(&self, k: EmulatorKind) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.emulator == k)
    }

    /// Writes the overall, by-month, by-year, by-location and length-scale
    /// CSV files into `dir`.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("metrics_overall.csv"))?;
        w.write_record(["emulator", "mse", "sd", "coverage", "n_points", "n_failed"])?;
        for r in &self.reports {
            w.write_record([
                r.emulator.label().to_string(),
                fmt_f(r.overall.mse),
                fmt_f(r.overall.sd),
                fmt_f(r.overall.coverage),
                r.points.len().to_string(),
                r.failures.len().to_string(),
            ])?;
        }
        w.flush()?;
        for (file, key, pick) in [
            ("metrics_by_month.csv", "month", (|r: &MetricsReport| &r.by_month) as fn(&MetricsReport) -> &Vec<Metric>),
            ("metrics_by_year.csv", "year", |r: &MetricsReport| &r.by_year),
            ("metrics_by_location.csv", "location", |r: &MetricsReport| &r.by_location),
        ] {
            let mut w = csv::Writer::from_path(dir.join(file))?;
            w.write_record(["emulator", key, "mse", "sd", "coverage"])?;
            for r in &self.reports {
                for (i, m) in pick(r).iter().enumerate() {
                    w.write_record([
                        r.emulator.label().to_string(),
                        (i + 1).to_string(),
                        fmt_f(m.mse),
                        fmt_f(m.sd),
                        fmt_f(m.coverage),
                    ])?;
                }
            }
            w.flush()?;
        }
        let mut w = csv::Writer::from_path(dir.join("metrics_by_point.csv"))?;
        w.write_record(["emulator", "point", "mse", "sd", "coverage"])?;
        for r in &self.reports {
            for p in &r.points {
                w.write_record([
                    r.emulator.label().to_string(),
                    p.point.to_string(),
                    fmt_f(p.mse),
                    fmt_f(p.sd),
                    fmt_f(p.coverage),
                ])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("lengthscales.csv"))?;
        w.write_record(["emulator", "component", "weight", "input", "posterior_mean"])?;
        for l in &self.lengthscales {
            w.write_record([
                l.emulator.label().to_string(),
                l.component.clone(),
                l.weight.to_string(),
                l.input.clone(),
                fmt_f(l.mean),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
        w.write_record(["emulator", "point", "message"])?;
        for (k, m) in &self.fit_failures {
            w.write_record([k.label(), "all", m.as_str()])?;
        }
        for r in &self.reports {
            for (p, m) in &r.failures {
                w.write_record([r.emulator.label(), &p.to_string(), m.as_str()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips, so reruns are byte identical.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

/// Fits every requested emulator once and scores it at each test input
/// against the HF runs `z_test` (original scale, design mode last).
pub fn holdout_study(
    data: &StudyData<'_>,
    x_test: &DesignMatrix<f64>,
    z_test: &DenseTensor<f64>,
    kinds: &[EmulatorKind],
    cfg: &EvalConfig,
) -> Result<StudyReport> {
    cfg.validate()?;
    let dims = data.field_dims();
    if z_test.order() != 4 || z_test.dims()[..3] != dims[..] || z_test.dims()[3] != x_test.n() {
        return Err(Error::dim("test runs do not match the HF field shape or test design"));
    }
    let fitted = FittedSet::fit(data, kinds, cfg)?;
    let hash = cfg.hash();
    let mut reports = Vec::new();
    for &k in kinds {
        if !fitted.has(k) {
            continue;
        }
        let mut stats = Vec::with_capacity(x_test.n());
        let mut failures = Vec::new();
        for start in (0..x_test.n()).step_by(cfg.batch) {
            let idx: Vec<usize> = (start..(start + cfg.batch).min(x_test.n())).collect();
            let xb = x_test.select(&idx)?;
            match fitted.predict(k, &xb, cfg.n_draws, noise_seed(cfg.naive.seed, start)) {
                Ok(preds) => {
                    let scored: Vec<Result<PointStats>> = preds
                        .par_iter()
                        .zip(&idx)
                        .map(|(p, &t)| point_stats(t, p, &z_test.slice_last(t)?))
                        .collect();
                    for (r, &t) in scored.into_iter().zip(&idx) {
                        match r {
                            Ok(s) => stats.push(s),
                            Err(e) => failures.push((t, e.to_string())),
                        }
                    }
                }
                Err(e) => failures.extend(idx.iter().map(|&t| (t, e.to_string()))),
            }
        }
        reports.push(MetricsReport::build(k, stats, failures, cfg.mcmc.seed, hash.clone())?);
    }
    Ok(StudyReport {
        reports,
        lengthscales: fitted.mf.as_ref().map(|m| lengthscale_rows(m, cfg)).unwrap_or_default(),
        fit_failures: fitted.failures,
    })
}

/// Outcome of one LOO fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    stats: Vec<(EmulatorKind, std::result::Result<PointStats, String>)>,
}

impl FoldResult {
    /// Squared error, SD and coverage sums for one emulator, or the failure.
    pub fn summary(&self, k: EmulatorKind) -> Option<std::result::Result<(f64, f64, f64), String>> {
        self.stats.iter().find(|s| s.0 == k).map(|s| match &s.1 {
            Ok(p) => Ok((p.total.sq, p.total.sd, p.total.hits)),
            Err(e) => Err(e.clone()),
        })
    }
}

/// Seed for fold `i`, independent of which other folds run.
pub fn fold_seed(base: u64, fold: usize) -> u64 {
    noise_seed(base ^ 0x100c_f01d, fold)
}

/// Runs the listed LOO folds (HF design indices) and returns their results
/// in the order given.
pub fn loocv_folds(data: &StudyData<'_>, folds: &[usize], kinds: &[EmulatorKind], cfg: &EvalConfig) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    data.check()?;
    let n_hf = data.x_hf.n();
    if n_hf < 3 {
        return Err(Error::Degenerate(format!("LOO-CV needs at least 3 HF runs, got {n_hf}")));
    }
    if let Some(&f) = folds.iter().find(|&&f| f >= n_hf) {
        return Err(Error::dim(format!("fold {f} out of range for {n_hf} HF runs")));
    }
    folds.par_iter().map(|&i| run_fold(data, i, kinds, cfg)).collect()
}

fn run_fold(data: &StudyData<'_>, i: usize, kinds: &[EmulatorKind], cfg: &EvalConfig) -> Result<FoldResult> {
    let n_hf = data.x_hf.n();
    let x_i = data.x_hf.row(i).to_vec();
    let truth = data.z_hf.slice_last(i)?;
    let keep_hf: Vec<usize> = (0..n_hf).filter(|&j| j != i).collect();
    let z_hf = data.z_hf.select_last(&keep_hf)?;
    let x_hf = data.x_hf.select(&keep_hf)?;
    let keep_lf: Vec<usize> = (0..data.x_lf.n())
        .filter(|&j| cfg.keep_lf_heldout || data.x_lf.row(j) != x_i.as_slice())
        .collect();
    let z_lf = data.z_lf.select_last(&keep_lf)?;
    let x_lf = data.x_lf.select(&keep_lf)?;
    let fold_data = StudyData {
        z_lf: &z_lf,
        z_hf: &z_hf,
        x_lf: &x_lf,
        x_hf: &x_hf,
        lf_mesh: data.lf_mesh,
        hf_mesh: data.hf_mesh,
    };
    let seed = fold_seed(cfg.mcmc.seed, i);
    let mut fold_cfg = cfg.clone();
    fold_cfg.mcmc.seed = seed;
    fold_cfg.naive.seed = fold_seed(cfg.naive.seed, i);
    let x_star = DesignMatrix::single(&x_i)?;
    let stats = match FittedSet::fit(&fold_data, kinds, &fold_cfg) {
        Ok(fitted) => kinds
            .iter()
            .map(|&k| {
                if let Some((_, msg)) = fitted.failures.iter().find(|f| f.0 == k) {
                    return (k, Err(msg.clone()));
                }
                let r = fitted
                    .predict(k, &x_star, cfg.n_draws, seed)
                    .and_then(|p| point_stats(i, &p[0], &truth))
                    .map_err(|e| e.to_string());
                (k, r)
            })
            .collect(),
        Err(e) => kinds.iter().map(|&k| (k, Err(e.to_string()))).collect(),
    };
    Ok(FoldResult { fold: i, stats })
}

/// Leave-one-out cross-validation over every HF design point. Failed folds
/// are recorded in each report rather than aborting the run.
pub fn loocv(data: &StudyData<'_>, kinds: &[EmulatorKind], cfg: &EvalConfig) -> Result<StudyReport> {
    let folds: Vec<usize> = (0..data.x_hf.n()).collect();
    let results = loocv_folds(data, &folds, kinds, cfg)?;
    let hash = cfg.hash();
    let mut reports = Vec::new();
    let mut fit_failures = Vec::new();
    for &k in kinds {
        let mut stats = Vec::new();
        let mut failures = Vec::new();
        for r in &results {
            match r.stats.iter().find(|s| s.0 == k).map(|s| &s.1) {
                Some(Ok(p)) => stats.push(p.clone()),
                Some(Err(e)) => failures.push((r.fold, e.clone())),
                None => {}
            }
        }
        if stats.is_empty() {
            fit_failures.push((k, format!("all {} folds failed", failures.len())));
            continue;
        }
        reports.push(MetricsReport::build(k, stats, failures, cfg.mcmc.seed, hash.clone())?);
    }
    Ok(StudyReport {
        reports,
        lengthscales: Vec::new(),
        fit_failures,
    })
}

/// Length scales of an MF fit on the full data.
pub fn mf_lengthscales(data: &StudyData<'_>, cfg: &EvalConfig) -> Result<Vec<LengthscaleRow>> {
    let fitted = FittedSet::fit(data, &[EmulatorKind::Mf], cfg)?;
    match (&fitted.mf, fitted.failures.first()) {
        (Some(m), _) => Ok(lengthscale_rows(m, cfg)),
        (None, Some((_, msg))) => Err(Error::Contract(format!("MF fit failed: {msg}"))),
        (None, None) => Err(Error::Contract("MF fit failed".into())),
    }
}
