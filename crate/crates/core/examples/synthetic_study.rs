//! Runs the two-fidelity synthetic study and prints overall metrics.
//!
//! `cargo run --release --example synthetic_study -- [reduced|full] [iters] [emulators]`

use std::time::Instant;

use mftensor::eval::{holdout_study, parse_emulators, EvalConfig, StudyData};
use mftensor::synth::{generate, SynthConfig};

fn main() -> mftensor::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let full = args.get(1).map(|s| s == "full").unwrap_or(false);
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(if full { 4000 } else { 1500 });
    let kinds = parse_emulators(args.get(3).map(String::as_str).unwrap_or("lf,hf,mf"))?;
    let synth = if full { SynthConfig::default() } else { SynthConfig::reduced() };

    let t0 = Instant::now();
    let data = generate(&synth)?;
    let mut cfg = EvalConfig::default();
    cfg.mcmc.n_iter = iters;
    cfg.mcmc.burn_in = iters / 2;
    let study = StudyData {
        z_lf: &data.z_lf,
        z_hf: &data.z_hf,
        x_lf: &data.lf_design,
        x_hf: &data.hf_design,
        lf_mesh: &data.lf_mesh,
        hf_mesh: &data.hf_mesh,
    };
    let report = holdout_study(&study, data.test_design.as_ref().expect("test inputs"), data.z_test.as_ref().expect("test runs"), &kinds, &cfg)?;
    for r in &report.reports {
        println!(
            "{:<6} mse {:.5e}  sd {:.4}  coverage {:.3}  failed {}",
            r.emulator.label(),
            r.overall.mse,
            r.overall.sd,
            r.overall.coverage,
            r.failures.len()
        );
    }
    for (k, m) in &report.fit_failures {
        println!("{k} failed: {m}");
    }
    for l in &report.lengthscales {
        println!("{} {} {} {:.3}", l.component, l.weight, l.input, l.mean);
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
