use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mftensor::baseline::NaiveOptions;
use mftensor::eval::{EvalConfig, RankChoice};
use mftensor::mcmc::McmcConfig;
use mftensor::sf::PriorConfig;
use mftensor::synth::SynthConfig;
use mftensor::tucker::HooiConfig;
use mftensor::Transform;

use crate::CliError;

/// Input files. Missing entries default to the files `simulate` writes under
/// `<output>/data`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub lf_ensemble: Option<PathBuf>,
    pub hf_ensemble: Option<PathBuf>,
    pub lf_design: Option<PathBuf>,
    pub hf_design: Option<PathBuf>,
    pub lf_mesh: Option<PathBuf>,
    pub hf_mesh: Option<PathBuf>,
    pub test_ensemble: Option<PathBuf>,
    pub test_design: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ranks {
    pub lf: RankChoice,
    pub hf: RankChoice,
    pub discrepancy: RankChoice,
}

impl Default for Ranks {
    fn default() -> Self {
        Self {
            lf: RankChoice::Variance(vec![0.99; 4]),
            hf: RankChoice::Variance(vec![0.99; 4]),
            discrepancy: RankChoice::Variance(vec![0.8; 4]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Interpolation {
    pub k: usize,
}

impl Default for Interpolation {
    fn default() -> Self {
        Self { k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prediction {
    pub n_draws: usize,
}

impl Default for Prediction {
    fn default() -> Self {
        Self { n_draws: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Loocv {
    pub keep_lf_heldout: bool,
    pub emulators: String,
}

impl Default for Loocv {
    fn default() -> Self {
        Self {
            keep_lf_heldout: false,
            emulators: "lf,hf,mf,naive".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataPaths,
    pub simulate: SynthConfig,
    pub transform: Option<Transform>,
    pub ranks: Ranks,
    pub interpolation: Interpolation,
    pub hooi: HooiConfig,
    pub mcmc: McmcConfig,
    pub priors: PriorConfig,
    pub prediction: Prediction,
    pub loocv: Loocv,
    pub naive: NaiveOptions,
    pub input_names: Option<Vec<String>>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            simulate: SynthConfig::default(),
            transform: None,
            ranks: Ranks::default(),
            interpolation: Interpolation::default(),
            hooi: HooiConfig::default(),
            mcmc: McmcConfig::default(),
            priors: PriorConfig::default(),
            prediction: Prediction::default(),
            loocv: Loocv::default(),
            naive: NaiveOptions::default(),
            input_names: None,
            output: PathBuf::from("mft_out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFile {
    LfEnsemble,
    HfEnsemble,
    LfDesign,
    HfDesign,
    LfMesh,
    HfMesh,
    TestEnsemble,
    TestDesign,
}

impl DataFile {
    fn default_name(self) -> &'static str {
        match self {
            Self::LfEnsemble => "lf.mft",
            Self::HfEnsemble => "hf.mft",
            Self::LfDesign => "lf_design.csv",
            Self::HfDesign => "hf_design.csv",
            Self::LfMesh => "lf_mesh.csv",
            Self::HfMesh => "hf_mesh.csv",
            Self::TestEnsemble => "test.mft",
            Self::TestDesign => "test_design.csv",
        }
    }

    fn field(self) -> &'static str {
        match self {
            Self::LfEnsemble => "data.lf_ensemble",
            Self::HfEnsemble => "data.hf_ensemble",
            Self::LfDesign => "data.lf_design",
            Self::HfDesign => "data.hf_design",
            Self::LfMesh => "data.lf_mesh",
            Self::HfMesh => "data.hf_mesh",
            Self::TestEnsemble => "data.test_ensemble",
            Self::TestDesign => "data.test_design",
        }
    }
}

/// A parsed config plus the directory its relative paths are resolved from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub cfg: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let l = Self { cfg, base };
        l.validate()?;
        Ok(l)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.cfg;
        let field = |name: &str, e: mftensor::Error| CliError::config(format!("{name}: {e}"));
        c.mcmc.validate().map_err(|e| field("mcmc", e))?;
        c.priors.validate().map_err(|e| field("priors", e))?;
        c.simulate.validate().map_err(|e| field("simulate", e))?;
        if let Some(t) = &c.transform {
            t.validate().map_err(|e| field("transform", e))?;
        }
        if c.interpolation.k == 0 {
            return Err(CliError::config("interpolation.k must be positive"));
        }
        if c.prediction.n_draws == 0 {
            return Err(CliError::config("prediction.n_draws must be positive"));
        }
        mftensor::eval::parse_emulators(&c.loocv.emulators).map_err(|e| field("loocv.emulators", e))?;
        for (name, r) in [("ranks.lf", &c.ranks.lf), ("ranks.hf", &c.ranks.hf), ("ranks.discrepancy", &c.ranks.discrepancy)] {
            match r {
                RankChoice::Explicit(v) if v.len() != 4 || v.contains(&0) => {
                    return Err(CliError::config(format!("{name}: need four positive ranks")))
                }
                RankChoice::Variance(v) if v.len() != 4 || v.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) => {
                    return Err(CliError::config(format!("{name}: need four targets in (0, 1]")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output(&self) -> PathBuf {
        self.resolve(&self.cfg.output)
    }

    /// Where a data file is (or will be) written.
    pub fn data_target(&self, f: DataFile) -> PathBuf {
        let d = &self.cfg.data;
        let given = match f {
            DataFile::LfEnsemble => &d.lf_ensemble,
            DataFile::HfEnsemble => &d.hf_ensemble,
            DataFile::LfDesign => &d.lf_design,
            DataFile::HfDesign => &d.hf_design,
            DataFile::LfMesh => &d.lf_mesh,
            DataFile::HfMesh => &d.hf_mesh,
            DataFile::TestEnsemble => &d.test_ensemble,
            DataFile::TestDesign => &d.test_design,
        };
        match given {
            Some(p) => self.resolve(p),
            None => self.output().join("data").join(f.default_name()),
        }
    }

    /// An input data file that must already exist.
    pub fn data_input(&self, f: DataFile) -> Result<PathBuf, CliError> {
        let p = self.data_target(f);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::config(format!("{}: {} does not exist", f.field(), p.display())))
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let c = &self.cfg;
        EvalConfig {
            lf_ranks: c.ranks.lf.clone(),
            hf_ranks: c.ranks.hf.clone(),
            disc_ranks: c.ranks.discrepancy.clone(),
            mcmc: c.mcmc.clone(),
            priors: c.priors.clone(),
            hooi: c.hooi,
            k_interp: c.interpolation.k,
            n_draws: c.prediction.n_draws,
            keep_lf_heldout: c.loocv.keep_lf_heldout,
            naive: c.naive.clone(),
            transform: c.transform,
            batch: 8,
            input_names: c.input_names.clone(),
        }
    }
}
