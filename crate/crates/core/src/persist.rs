//! On-disk layouts: Tucker directories, design and mesh CSVs, and fitted
//! model directories. Tensors and matrices are MFT1 files; everything else is
//! JSON or CSV. All numbers are written in shortest round-trip form, so a
//! reloaded model predicts exactly what the in-memory one did.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::DesignMatrix;
use crate::mcmc::PosteriorSamples;
use crate::mf::{MeshCoords, MfEmulator, MfParts};
use crate::sf::{PriorConfig, SfEmulator};
use crate::tensor::{load_matrix, save_matrix, DenseTensor};
use crate::transform::TransformSpec;
use crate::tucker::{explained_variance, TuckerModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuckerManifest {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub explained_variance: Option<f64>,
    pub hooi_iterations: Option<usize>,
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// `core.mft`, `factor_<k>.mft` and `tucker.json` inside `dir`.
pub fn save_tucker(
    model: &TuckerModel<f64>,
    dir: impl AsRef<Path>,
    data: Option<&DenseTensor<f64>>,
    hooi_iterations: Option<usize>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    model.core().save(dir.join("core.mft"))?;
    for (k, f) in model.factors().iter().enumerate() {
        save_matrix(f, dir.join(format!("factor_{k}.mft")))?;
    }
    let explained = match data {
        Some(t) => Some(explained_variance(t, model)?),
        None => None,
    };
    write_json(
        &TuckerManifest {
            dims: model.dims(),
            ranks: model.ranks(),
            explained_variance: explained,
            hooi_iterations,
        },
        &dir.join("tucker.json"),
    )
}

pub fn load_tucker(dir: impl AsRef<Path>) -> Result<TuckerModel<f64>> {
    let dir = dir.as_ref();
    let manifest: TuckerManifest = read_json(&dir.join("tucker.json"))?;
    let core = DenseTensor::load(dir.join("core.mft"))?;
    let factors = (0..manifest.ranks.len())
        .map(|k| load_matrix(dir.join(format!("factor_{k}.mft"))))
        .collect::<Result<Vec<_>>>()?;
    let model = TuckerModel::new(core, factors)?;
    if model.ranks() != manifest.ranks || model.dims() != manifest.dims {
        return Err(Error::Format(format!("{}: manifest disagrees with stored factors", dir.display())));
    }
    Ok(model)
}

/// Header row of input names, then one row per design point.
pub fn save_design(d: &DesignMatrix<f64>, path: impl AsRef<Path>, names: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..d.p())
        .map(|j| names.and_then(|n| n.get(j).cloned()).unwrap_or_else(|| format!("x{}", j + 1)))
        .collect();
    w.write_record(&header)?;
    for r in d.rows() {
        w.write_record(r.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_num(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())))
}

/// Returns the design and its column names.
pub fn load_design(path: impl AsRef<Path>) -> Result<(DesignMatrix<f64>, Vec<String>)> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(Error::Format(format!("{}: ragged design row", path.display())));
        }
        rows.push(rec.iter().map(|s| parse_num(s, path)).collect::<Result<Vec<f64>>>()?);
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: design has no rows", path.display())));
    }
    Ok((DesignMatrix::new(rows)?, names))
}

/// `index,x,y` (plus `z` for 3-D meshes), indices from 0.
pub fn save_mesh(m: &MeshCoords<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index", "x", "y"];
    if m.dim() == 3 {
        header.push("z");
    }
    w.write_record(&header)?;
    for (i, p) in m.points().iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(p.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<MeshCoords<f64>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let dim = match h.iter().collect::<Vec<_>>().as_slice() {
        ["index", "x", "y"] => 2,
        ["index", "x", "y", "z"] => 3,
        _ => return Err(Error::Format(format!("{}: mesh header must be index,x,y[,z]", path.display()))),
    };
    let mut pts = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != dim + 1 {
            return Err(Error::Format(format!("{}: ragged mesh row", path.display())));
        }
        if rec[0].trim() != row.to_string() {
            return Err(Error::Format(format!("{}: mesh indices must run 0,1,2,…", path.display())));
        }
        pts.push((1..=dim).map(|k| parse_num(&rec[k], path)).collect::<Result<Vec<f64>>>()?);
    }
    MeshCoords::new(pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sf,
    Mf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfManifest {
    pub kind: ModelKind,
    pub ranks: Vec<usize>,
    pub priors: PriorConfig,
    pub a_post: f64,
    pub b_post: f64,
    pub data_sq_norm: f64,
    pub gram_diag: Vec<f64>,
    pub fixed_noise_precision: Option<f64>,
    pub transform: Option<TransformSpec<f64>>,
    pub seed: u64,
    pub input_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfManifest {
    pub kind: ModelKind,
    pub lf_ranks: Vec<usize>,
    pub disc_ranks: Vec<usize>,
    pub priors: PriorConfig,
    pub a_delta: f64,
    pub b_delta: f64,
    pub hf_sq_norm: f64,
    pub k_interp: usize,
    pub transform: Option<TransformSpec<f64>>,
    pub seed: u64,
}

fn names_for(p: usize, names: Option<&[String]>) -> Vec<String> {
    (0..p)
        .map(|j| names.and_then(|n| n.get(j).cloned()).unwrap_or_else(|| format!("x{}", j + 1)))
        .collect()
}

/// Writes `tucker/`, `design.csv`, `gamma_hat.mft`, `posterior.csv`,
/// `diagnostics.json` and `manifest.json`.
pub fn save_sf(m: &SfEmulator<f64>, dir: impl AsRef<Path>, names: Option<&[String]>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_tucker(&m.tucker, dir.join("tucker"), None, None)?;
    let names = names_for(m.design.p(), names);
    save_design(&m.design, dir.join("design.csv"), Some(&names))?;
    save_matrix(&m.gamma_hat, dir.join("gamma_hat.mft"))?;
    m.samples.write_csv(dir.join("posterior.csv"))?;
    m.samples.write_diagnostics(dir.join("diagnostics.json"))?;
    write_json(
        &SfManifest {
            kind: ModelKind::Sf,
            ranks: m.tucker.ranks(),
            priors: m.priors.clone(),
            a_post: m.a_post,
            b_post: m.b_post,
            data_sq_norm: m.data_sq_norm,
            gram_diag: m.gram_diag.clone(),
            fixed_noise_precision: m.fixed_noise_precision,
            transform: m.transform,
            seed: m.seed,
            input_names: names,
        },
        &dir.join("manifest.json"),
    )
}

pub fn load_sf(dir: impl AsRef<Path>) -> Result<SfEmulator<f64>> {
    let dir = dir.as_ref();
    let man: SfManifest = read_json(&dir.join("manifest.json"))?;
    if man.kind != ModelKind::Sf {
        return Err(Error::Format(format!("{} holds an MF model", dir.display())));
    }
    let tucker = load_tucker(dir.join("tucker"))?;
    let (design, _) = load_design(dir.join("design.csv"))?;
    let gamma_hat = load_matrix(dir.join("gamma_hat.mft"))?;
    let samples = PosteriorSamples::read_csv(dir.join("posterior.csv"))?;
    let r = tucker.ranks();
    if gamma_hat.shape() != (design.n(), r[3]) || man.gram_diag.len() != r[3] {
        return Err(Error::Format(format!("{}: stored statistic disagrees with ranks", dir.display())));
    }
    Ok(SfEmulator {
        tucker,
        design,
        gamma_hat,
        gram_diag: man.gram_diag,
        samples,
        a_post: man.a_post,
        b_post: man.b_post,
        data_sq_norm: man.data_sq_norm,
        priors: man.priors,
        fixed_noise_precision: man.fixed_noise_precision,
        transform: man.transform,
        seed: man.seed,
    })
}

/// `lf/` (an SF model directory), the two meshes, the interpolated spatial
/// basis, `discrepancy/`, the HF design and statistics, posterior and
/// manifest.
pub fn save_mf(m: &MfEmulator<f64>, dir: impl AsRef<Path>, names: Option<&[String]>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_sf(&m.lf, dir.join("lf"), names)?;
    save_mesh(&m.lf_mesh, dir.join("lf_mesh.csv"))?;
    save_mesh(&m.hf_mesh, dir.join("hf_mesh.csv"))?;
    save_matrix(&m.parts.us_tilde, dir.join("us_tilde.mft"))?;
    save_tucker(&m.parts.disc, dir.join("discrepancy"), None, None)?;
    save_design(&m.design_hf, dir.join("hf_design.csv"), Some(&names_for(m.design_hf.p(), names)))?;
    save_matrix(&m.hf_weights, dir.join("hf_weights.mft"))?;
    save_matrix(&m.core_gram, dir.join("core_gram.mft"))?;
    save_matrix(&m.theta_hf, dir.join("theta_hf.mft"))?;
    m.samples.write_csv(dir.join("posterior.csv"))?;
    m.samples.write_diagnostics(dir.join("diagnostics.json"))?;
    write_json(
        &MfManifest {
            kind: ModelKind::Mf,
            lf_ranks: m.lf.tucker.ranks(),
            disc_ranks: m.parts.disc.ranks(),
            priors: m.priors.clone(),
            a_delta: m.delta_hyper.0,
            b_delta: m.delta_hyper.1,
            hf_sq_norm: m.hf_sq_norm,
            k_interp: m.k_interp,
            transform: m.transform,
            seed: m.seed,
        },
        &dir.join("manifest.json"),
    )
}

pub fn load_mf(dir: impl AsRef<Path>) -> Result<MfEmulator<f64>> {
    let dir = dir.as_ref();
    let man: MfManifest = read_json(&dir.join("manifest.json"))?;
    if man.kind != ModelKind::Mf {
        return Err(Error::Format(format!("{} holds an SF model", dir.display())));
    }
    let lf = load_sf(dir.join("lf"))?;
    let disc = load_tucker(dir.join("discrepancy"))?;
    let f = lf.tucker.factors();
    let parts = MfParts {
        core: lf.tucker.core().clone(),
        us_tilde: load_matrix(dir.join("us_tilde.mft"))?,
        um: f[1].clone(),
        uy: f[2].clone(),
        disc,
    };
    Ok(MfEmulator {
        lf_mesh: load_mesh(dir.join("lf_mesh.csv"))?,
        hf_mesh: load_mesh(dir.join("hf_mesh.csv"))?,
        parts,
        design_hf: load_design(dir.join("hf_design.csv"))?.0,
        hf_weights: load_matrix(dir.join("hf_weights.mft"))?,
        core_gram: load_matrix(dir.join("core_gram.mft"))?,
        theta_hf: load_matrix(dir.join("theta_hf.mft"))?,
        samples: PosteriorSamples::read_csv(dir.join("posterior.csv"))?,
        delta_hyper: (man.a_delta, man.b_delta),
        hf_sq_norm: man.hf_sq_norm,
        k_interp: man.k_interp,
        priors: man.priors,
        transform: man.transform,
        seed: man.seed,
        lf,
    })
}

pub enum LoadedModel {
    Sf(SfEmulator<f64>),
    Mf(Box<MfEmulator<f64>>),
}

/// Reads whichever model kind `dir` holds.
pub fn load_model(dir: impl AsRef<Path>) -> Result<LoadedModel> {
    let dir = dir.as_ref();
    let v: serde_json::Value = read_json(&dir.join("manifest.json"))?;
    match v.get("kind").and_then(|k| k.as_str()) {
        Some("sf") => Ok(LoadedModel::Sf(load_sf(dir)?)),
        Some("mf") => Ok(LoadedModel::Mf(Box::new(load_mf(dir)?))),
        _ => Err(Error::Format(format!("{}: manifest has no model kind", dir.display()))),
    }
}
