//! `mft`: simulate → decompose → fit → predict → loocv → report.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mftensor::eval::{holdout_study, loocv, mf_lengthscales, parse_emulators, EmulatorKind, FittedSet, StudyData, StudyReport};
use mftensor::mf::MeshCoords;
use mftensor::persist::{load_design, load_mesh, load_model, save_design, save_mesh, save_mf, save_sf, save_tucker, LoadedModel};
use mftensor::synth::generate;
use mftensor::transform::Direction;
use mftensor::tucker::hooi;
use mftensor::{Design, Error, Tensor};

use config::{DataFile, Loaded};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    fn diagnostic(msg: impl Into<String>) -> Self {
        Self { code: 5, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Dimension(_) | Error::ModeIndex { .. } => 3,
            _ => 4,
        };
        Self { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "mft", version, about = "Multi-fidelity tensor emulation of spatiotemporal simulator output")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MFT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sf,
    Mf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Fidelity {
    Lf,
    Hf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    #[value(name = "fwd", alias = "forward")]
    Forward,
    #[value(name = "inv", alias = "inverse")]
    Inverse,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-fidelity study data.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Apply the bounded-data transform to an MFT1 tensor.
    Transform {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long = "out", alias = "output")]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "fwd")]
        direction: Dir,
        /// Overrides the configured (or default) epsilon.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
    },
    /// Tucker-decompose an ensemble and write the factors.
    Decompose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "lf")]
        fidelity: Fidelity,
    },
    /// Fit an emulator and write its model directory.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Training ensemble for single-fidelity fits.
        #[arg(long, value_enum, default_value = "hf")]
        fidelity: Fidelity,
        /// Treat R-hat above 1.1 as a failure.
        #[arg(long)]
        strict_rhat: bool,
    },
    /// Predict fields at the inputs listed in a design CSV.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-out cross-validation over the HF design.
    Loocv {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of lf,hf,mf,naive.
        #[arg(long)]
        emulators: Option<String>,
        #[arg(long)]
        keep_lf_heldout: bool,
    },
    /// Score emulators at held-out test inputs.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        emulators: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Simulate { config } => simulate(&Loaded::read(&config)?),
        Command::Transform { config, input, output, direction, eps, lo, hi } => {
            transform(config.as_deref(), &input, &output, direction, [eps, lo, hi])
        }
        Command::Decompose { config, fidelity } => decompose(&Loaded::read(&config)?, fidelity),
        Command::Fit { config, mode, fidelity, strict_rhat } => fit(&Loaded::read(&config)?, mode, fidelity, strict_rhat),
        Command::Predict { config, model, inputs, out } => predict(&Loaded::read(&config)?, &model, &inputs, out),
        Command::Loocv { config, emulators, keep_lf_heldout } => {
            let mut l = Loaded::read(&config)?;
            if keep_lf_heldout {
                l.cfg.loocv.keep_lf_heldout = true;
            }
            run_loocv(&l, emulators)
        }
        Command::Report { config, emulators } => report(&Loaded::read(&config)?, emulators),
    }
}

fn create_parent(p: &Path) -> CliResult {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).map_err(Error::from)?;
    }
    Ok(())
}

fn write_json(value: &serde_json::Value, path: &Path) -> CliResult {
    create_parent(path)?;
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    std::fs::write(path, s).map_err(Error::from)?;
    Ok(())
}

fn simulate(l: &Loaded) -> CliResult {
    let c = &l.cfg.simulate;
    let data = generate(c)?;
    let names = l.cfg.input_names.as_deref();
    let save_t = |t: &Tensor, f: DataFile| -> CliResult {
        let p = l.data_target(f);
        create_parent(&p)?;
        Ok(t.save(p)?)
    };
    let save_d = |d: &Design, f: DataFile| -> CliResult {
        let p = l.data_target(f);
        create_parent(&p)?;
        Ok(save_design(d, p, names)?)
    };
    let save_m = |m: &MeshCoords<f64>, f: DataFile| -> CliResult {
        let p = l.data_target(f);
        create_parent(&p)?;
        Ok(save_mesh(m, p)?)
    };
    save_t(&data.z_lf, DataFile::LfEnsemble)?;
    save_t(&data.z_hf, DataFile::HfEnsemble)?;
    save_d(&data.lf_design, DataFile::LfDesign)?;
    save_d(&data.hf_design, DataFile::HfDesign)?;
    save_m(&data.lf_mesh, DataFile::LfMesh)?;
    save_m(&data.hf_mesh, DataFile::HfMesh)?;
    if let (Some(x), Some(z)) = (&data.test_design, &data.z_test) {
        save_t(z, DataFile::TestEnsemble)?;
        save_d(x, DataFile::TestDesign)?;
    }
    write_json(
        &serde_json::json!({ "simulate": c, "lf_dims": data.z_lf.dims(), "hf_dims": data.z_hf.dims() }),
        &l.output().join("data").join("provenance.json"),
    )?;
    println!("LF ensemble {:?}, HF ensemble {:?}", data.z_lf.dims(), data.z_hf.dims());
    Ok(())
}

fn transform(config: Option<&Path>, input: &Path, output: &Path, dir: Dir, overrides: [Option<f64>; 3]) -> CliResult {
    let mut spec: mftensor::Transform = match config {
        Some(c) => Loaded::read(c)?.cfg.transform.unwrap_or_default(),
        None => Default::default(),
    };
    let [eps, lo, hi] = overrides;
    spec.epsilon = eps.unwrap_or(spec.epsilon);
    spec.lo = lo.unwrap_or(spec.lo);
    spec.hi = hi.unwrap_or(spec.hi);
    spec.validate().map_err(|e| CliError::config(format!("transform: {e}")))?;
    let t = Tensor::load(input)?;
    let d = match dir {
        Dir::Forward => Direction::Forward,
        Dir::Inverse => Direction::Inverse,
    };
    create_parent(output)?;
    spec.apply_tensor(&t, d)?.save(output)?;
    Ok(())
}

/// Training data for both fidelities, loaded from the configured files.
struct Inputs {
    z_lf: Tensor,
    z_hf: Tensor,
    x_lf: Design,
    x_hf: Design,
    lf_mesh: MeshCoords<f64>,
    hf_mesh: MeshCoords<f64>,
}

impl Inputs {
    fn load(l: &Loaded) -> CliResult<Self> {
        Ok(Self {
            z_lf: Tensor::load(l.data_input(DataFile::LfEnsemble)?)?,
            z_hf: Tensor::load(l.data_input(DataFile::HfEnsemble)?)?,
            x_lf: load_design(l.data_input(DataFile::LfDesign)?)?.0,
            x_hf: load_design(l.data_input(DataFile::HfDesign)?)?.0,
            lf_mesh: load_mesh(l.data_input(DataFile::LfMesh)?)?,
            hf_mesh: load_mesh(l.data_input(DataFile::HfMesh)?)?,
        })
    }

    fn study(&self) -> StudyData<'_> {
        StudyData {
            z_lf: &self.z_lf,
            z_hf: &self.z_hf,
            x_lf: &self.x_lf,
            x_hf: &self.x_hf,
            lf_mesh: &self.lf_mesh,
            hf_mesh: &self.hf_mesh,
        }
    }
}

fn decompose(l: &Loaded, fid: Fidelity) -> CliResult {
    let (file, choice, name) = match fid {
        Fidelity::Lf => (DataFile::LfEnsemble, &l.cfg.ranks.lf, "tucker_lf"),
        Fidelity::Hf => (DataFile::HfEnsemble, &l.cfg.ranks.hf, "tucker_hf"),
    };
    let mut z = Tensor::load(l.data_input(file)?)?;
    if let Some(t) = &l.cfg.transform {
        z = t.apply_tensor(&z, Direction::Forward)?;
    }
    let ranks = choice.resolve(&z)?;
    let (model, rep) = hooi(&z, &ranks, l.cfg.hooi)?;
    save_tucker(&model, l.output().join(name), Some(&z), Some(rep.iterations))?;
    println!("ranks {:?} after {} HOOI sweeps", ranks, rep.iterations);
    Ok(())
}

fn rhat_check(flagged: Vec<String>, max: f64, strict: bool) -> CliResult {
    if flagged.is_empty() {
        return Ok(());
    }
    let msg = format!("R-hat above 1.1 (max {max:.3}) for {}", flagged.join(", "));
    if strict {
        Err(CliError::diagnostic(msg))
    } else {
        eprintln!("warning: {msg}");
        Ok(())
    }
}

fn fit(l: &Loaded, mode: Mode, fid: Fidelity, strict: bool) -> CliResult {
    let inputs = Inputs::load(l)?;
    let kind = match (mode, fid) {
        (Mode::Mf, _) => EmulatorKind::Mf,
        (Mode::Sf, Fidelity::Lf) => EmulatorKind::Lf,
        (Mode::Sf, Fidelity::Hf) => EmulatorKind::Hf,
    };
    let fitted = FittedSet::fit(&inputs.study(), &[kind], &l.eval_config())?;
    if let Some((_, msg)) = fitted.failures.first() {
        return Err(CliError { code: 4, msg: format!("{kind} fit failed: {msg}") });
    }
    let names = l.cfg.input_names.as_deref();
    let (dir, samples) = match kind {
        EmulatorKind::Mf => {
            let m = fitted.mf.as_ref().expect("fitted");
            let dir = l.output().join("model_mf");
            save_mf(m, &dir, names)?;
            (dir, &m.samples)
        }
        EmulatorKind::Lf => {
            let m = fitted.lf.as_ref().expect("fitted");
            let dir = l.output().join("model_sf_lf");
            save_sf(m, &dir, names)?;
            (dir, &m.samples)
        }
        _ => {
            let m = fitted.hf.as_ref().expect("fitted");
            let dir = l.output().join("model_sf_hf");
            save_sf(m, &dir, names)?;
            (dir, &m.samples)
        }
    };
    println!("model written to {}", dir.display());
    rhat_check(samples.flagged(1.1), samples.max_rhat(), strict)
}

fn predict(l: &Loaded, model: &Path, inputs: &Path, out: Option<PathBuf>) -> CliResult {
    let (x, _) = load_design(inputs)?;
    let n = l.cfg.prediction.n_draws;
    let preds = match load_model(model)? {
        LoadedModel::Sf(m) => m.predict_many(&x, n)?,
        LoadedModel::Mf(m) => m.predict_many(&x, n)?,
    };
    let out = out.unwrap_or_else(|| l.output().join("predictions"));
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    for (t, p) in preds.iter().enumerate() {
        p.mean.save(out.join(format!("pred_{t:04}_mean.mft")))?;
        p.sd.save(out.join(format!("pred_{t:04}_sd.mft")))?;
        p.lower.save(out.join(format!("pred_{t:04}_q025.mft")))?;
        p.upper.save(out.join(format!("pred_{t:04}_q975.mft")))?;
    }
    println!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

fn emulator_list(l: &Loaded, over: Option<String>) -> CliResult<Vec<EmulatorKind>> {
    let s = over.unwrap_or_else(|| l.cfg.loocv.emulators.clone());
    parse_emulators(&s).map_err(|e| CliError::config(format!("emulators: {e}")))
}

fn finish(l: &Loaded, r: &StudyReport, kinds: &[EmulatorKind], dir: &Path) -> CliResult {
    r.write_csvs(dir)?;
    let cfg = l.eval_config();
    let failed: Vec<_> = r.reports.iter().filter(|m| !m.is_complete()).map(|m| m.emulator.label()).collect();
    write_json(
        &serde_json::json!({
            "emulators": kinds.iter().map(|k| k.label()).collect::<Vec<_>>(),
            "seed": cfg.mcmc.seed,
            "config_hash": cfg.hash(),
            "incomplete": failed,
            "unfitted": r.fit_failures.iter().map(|f| f.0.label()).collect::<Vec<_>>(),
        }),
        &dir.join("provenance.json"),
    )?;
    for m in &r.reports {
        println!(
            "{:<6} mse {:.4e}  sd {:.4}  coverage {:.3}{}",
            m.emulator.label(),
            m.overall.mse,
            m.overall.sd,
            m.overall.coverage,
            if m.is_complete() { "" } else { "  (incomplete)" }
        );
    }
    for (k, msg) in &r.fit_failures {
        eprintln!("warning: {k}: {msg}");
    }
    Ok(())
}

fn run_loocv(l: &Loaded, emulators: Option<String>) -> CliResult {
    let kinds = emulator_list(l, emulators)?;
    let inputs = Inputs::load(l)?;
    let cfg = l.eval_config();
    let mut r = loocv(&inputs.study(), &kinds, &cfg)?;
    if kinds.contains(&EmulatorKind::Mf) {
        match mf_lengthscales(&inputs.study(), &cfg) {
            Ok(rows) => r.lengthscales = rows,
            Err(e) => eprintln!("warning: full-data MF fit failed: {e}"),
        }
    }
    finish(l, &r, &kinds, &l.output().join("loocv"))
}

fn report(l: &Loaded, emulators: Option<String>) -> CliResult {
    let kinds = emulator_list(l, emulators)?;
    let inputs = Inputs::load(l)?;
    let x = load_design(l.data_input(DataFile::TestDesign)?)?.0;
    let z = Tensor::load(l.data_input(DataFile::TestEnsemble)?)?;
    let r = holdout_study(&inputs.study(), &x, &z, &kinds, &l.eval_config())?;
    finish(l, &r, &kinds, &l.output().join("report"))
}
