use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mftensor::persist::{load_design, save_design, save_mesh, TuckerManifest};
use mftensor::synth::grid_mesh;
use mftensor::{Design, Tensor};

fn mft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mft"))
        .args(args)
        .env_remove("MFT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p
}

const TINY: &str = r#"{
  "simulate": {"grid_lf": 4, "grid_hf": 8, "n_months": 3, "n_years": 2, "n_lf": 12, "n_hf": 4, "n_test": 3, "lhs_candidates": 10},
  "ranks": {"lf": {"explicit": [3, 2, 2, 3]}, "hf": {"explicit": [3, 2, 2, 2]}, "discrepancy": {"explicit": [2, 2, 1, 2]}},
  "mcmc": {"n_chains": 2, "n_iter": 300, "burn_in": 150, "seed": 5},
  "prediction": {"n_draws": 120},
  "output": "out"
}"#;

#[test]
fn default_simulation_has_the_study_shapes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"simulate": {"n_test": 0, "lhs_candidates": 5}, "output": "out"}"#);
    let cfg = cfg.to_str().unwrap();
    let o = mft(&["simulate", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = dir.path().join("out/data");
    assert_eq!(Tensor::load(data.join("lf.mft")).unwrap().dims(), &[625, 12, 5, 100]);
    assert_eq!(Tensor::load(data.join("hf.mft")).unwrap().dims(), &[2500, 12, 5, 10]);
    let first = std::fs::read(data.join("hf.mft")).unwrap();
    let design = std::fs::read(data.join("lf_design.csv")).unwrap();
    assert_eq!(code(&mft(&["simulate", "--config", cfg])), 0);
    assert_eq!(std::fs::read(data.join("hf.mft")).unwrap(), first);
    assert_eq!(std::fs::read(data.join("lf_design.csv")).unwrap(), design);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"simulate": {"n_lf": 5, "n_hf": 8}}"#);
    let o = mft(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let cfg = write_config(dir.path(), "{\n  \"mcmc\": {\"n_iters\": 10}\n}");
    let o = mft(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("n_iters") && err.contains("line 2"), "{err}");
    let o = mft(&["loocv", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let missing = write_config(dir.path(), r#"{"output": "nowhere"}"#);
    assert_eq!(code(&mft(&["fit", "--config", missing.to_str().unwrap(), "--mode", "sf"])), 2);
}

#[test]
fn bad_tensor_files_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mft");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let o = mft(&["transform", "--in", bad.to_str().unwrap(), "--out", dir.path().join("o.mft").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn transform_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let t = Tensor::from_fn(vec![4, 3, 2], |i| 0.05 + 0.1 * (i[0] + i[1] + i[2]) as f64).unwrap();
    t.save(p("x.mft")).unwrap();
    let fwd = mft(&["transform", "--in", &p("x.mft"), "--out", &p("y.mft"), "--direction", "fwd", "--eps", "0.01"]);
    assert_eq!(code(&fwd), 0, "{}", String::from_utf8_lossy(&fwd.stderr));
    let inv = mft(&["transform", "--in", &p("y.mft"), "--out", &p("z.mft"), "--direction", "inv", "--eps", "0.01"]);
    assert_eq!(code(&inv), 0);
    let back = Tensor::load(p("z.mft")).unwrap();
    assert!(back.values().iter().zip(t.values()).all(|(a, b)| (a - b).abs() < 1e-9));
    let bad = mft(&["transform", "--in", &p("x.mft"), "--out", &p("w.mft"), "--lo", "0.9", "--hi", "0.5"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn rank_one_ensemble_decomposes_to_rank_one() {
    let dir = tempfile::tempdir().unwrap();
    let (ns, nm, ny, nx) = (9, 4, 3, 5);
    let t = Tensor::from_fn(vec![ns, nm, ny, nx], |i| {
        (1.0 + i[0] as f64) * (0.5 + (i[1] as f64).sin()) * (2.0 - i[2] as f64 * 0.3) * (1.0 + i[3] as f64 * 0.1)
    })
    .unwrap();
    t.save(dir.path().join("lf.mft")).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"data": {"lf_ensemble": "lf.mft"}, "ranks": {"lf": {"variance": [0.99, 0.99, 0.99, 0.99]}}, "output": "out"}"#,
    );
    let o = mft(&["decompose", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/tucker_lf/tucker.json")).unwrap();
    let man: TuckerManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(man.ranks, vec![1, 1, 1, 1]);
}

#[test]
fn fitted_model_reproduces_a_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let (nm, ny, nx) = (3, 2, 8);
    let mesh = grid_mesh(3);
    let design = Design::new((0..nx).map(|i| vec![i as f64 / (nx - 1) as f64, ((i * 3) % nx) as f64 / nx as f64]).collect()).unwrap();
    let z = Tensor::from_fn(vec![9, nm, ny, nx], |i| {
        let x = design.row(i[3]);
        let s = &mesh.points()[i[0]];
        (s[0] * 3.0 + x[0]).sin() * (1.0 + i[1] as f64) + x[1] * s[1] * (1.0 + i[2] as f64) + 0.3 * x[0] * x[1]
    })
    .unwrap();
    z.save(dir.path().join("hf.mft")).unwrap();
    z.save(dir.path().join("lf.mft")).unwrap();
    save_design(&design, dir.path().join("design.csv"), None).unwrap();
    save_mesh(&mesh, dir.path().join("mesh.csv")).unwrap();
    save_design(&Design::single(design.row(3)).unwrap(), dir.path().join("x.csv"), None).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{
          "data": {"lf_ensemble": "lf.mft", "hf_ensemble": "hf.mft", "lf_design": "design.csv", "hf_design": "design.csv", "lf_mesh": "mesh.csv", "hf_mesh": "mesh.csv"},
          "ranks": {"hf": {"variance": [1.0, 1.0, 1.0, 1.0]}},
          "mcmc": {"n_chains": 2, "n_iter": 600, "burn_in": 300},
          "prediction": {"n_draws": 150},
          "output": "out"
        }"#,
    );
    let cfg = cfg.to_str().unwrap();
    let o = mft(&["fit", "--config", cfg, "--mode", "sf"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = dir.path().join("out/model_sf_hf");
    assert!(model.join("manifest.json").is_file() && model.join("diagnostics.json").is_file());
    let o = mft(&["predict", "--config", cfg, "--model", model.to_str().unwrap(), "--inputs", dir.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mean = Tensor::load(dir.path().join("out/predictions/pred_0000_mean.mft")).unwrap();
    let truth = z.slice_last(3).unwrap();
    let num: f64 = mean.values().iter().zip(truth.values()).map(|(a, b)| (a - b).powi(2)).sum();
    let rel = (num / truth.norm_squared()).sqrt();
    assert!(rel < 0.01, "relative error {rel}");
    for q in ["sd", "q025", "q975"] {
        assert!(dir.path().join(format!("out/predictions/pred_0000_{q}.mft")).is_file());
    }
}

#[test]
fn strict_rhat_turns_warnings_into_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace(r#""n_iter": 300, "burn_in": 150"#, r#""n_iter": 16, "burn_in": 8"#));
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&mft(&["simulate", "--config", cfg])), 0);
    let o = mft(&["fit", "--config", cfg, "--mode", "mf", "--strict-rhat"]);
    let diag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/model_mf/diagnostics.json")).unwrap()).unwrap();
    let flagged = !diag["rhat_flagged"].as_array().unwrap().is_empty();
    assert_eq!(code(&o), if flagged { 5 } else { 0 }, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mft(&["fit", "--config", cfg, "--mode", "mf"]);
    assert_eq!(code(&o), 0);
    if flagged {
        assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    }
}

#[test]
fn pipeline_runs_end_to_end_and_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&mft(&["simulate", "--config", cfg])), 0);
    assert_eq!(code(&mft(&["decompose", "--config", cfg, "--fidelity", "hf"])), 0);
    let o = mft(&["fit", "--config", cfg, "--mode", "mf"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let x = out.join("data/test_design.csv");
    assert_eq!(load_design(&x).unwrap().0.n(), 3);
    let o = mft(&["predict", "--config", cfg, "--model", out.join("model_mf").to_str().unwrap(), "--inputs", x.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Tensor::load(out.join("predictions/pred_0002_mean.mft")).unwrap().dims(), &[64, 3, 2]);

    let o = mft(&["--threads", "1", "loocv", "--config", cfg, "--emulators", "lf,mf,naive"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first: Vec<Vec<u8>> = ["metrics_overall.csv", "metrics_by_month.csv", "lengthscales.csv"]
        .iter()
        .map(|f| std::fs::read(out.join("loocv").join(f)).unwrap())
        .collect();
    let overall = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(overall.lines().count(), 4, "{overall}");
    assert!(overall.starts_with("emulator,mse,sd,coverage"));
    let o = mft(&["loocv", "--config", cfg, "--emulators", "lf,mf,naive"]);
    assert_eq!(code(&o), 0);
    for (f, bytes) in ["metrics_overall.csv", "metrics_by_month.csv", "lengthscales.csv"].iter().zip(&first) {
        assert_eq!(&std::fs::read(out.join("loocv").join(f)).unwrap(), bytes, "{f}");
    }

    let o = mft(&["report", "--config", cfg, "--emulators", "lf,hf,mf"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics_overall.csv", "metrics_by_month.csv", "metrics_by_year.csv", "metrics_by_location.csv", "lengthscales.csv"] {
        assert!(out.join("report").join(f).is_file(), "{f}");
    }
}
