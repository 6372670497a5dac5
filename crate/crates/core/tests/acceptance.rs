//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! The synthetic-study criteria use the reduced configuration by default; set
//! `MFT_ACCEPTANCE_FULL=1` for the full-scale study (slow). Failures are
//! reported but only change the exit status under `MFT_ACCEPTANCE_STRICT=1`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{grid_mesh as toy_mesh, MfToy};
use mftensor::eval::{holdout_study, loocv, EmulatorKind, EvalConfig, FittedSet, RankChoice, StudyData};
use mftensor::gp::{cov_matrix, cov_symmetric, mvn_condition, mvn_logpdf, DesignMatrix, GpHyperparams};
use mftensor::mcmc::{run_chains, split_rhat, FnTarget, McmcConfig};
use mftensor::mf::{mf_reduced_gram, MeshCoords, MfDraw, MfEmulator, MfOptions, MfParts};
use mftensor::sf::{basis_weights, field_basis, reduced_gram, SfDraw, SfEmulator, SfOptions};
use mftensor::synth::{generate, interpolate_field, SynthConfig, SynthData};
use mftensor::tensor::DenseTensor;
use mftensor::transform::TransformSpec;
use mftensor::tucker::{hooi, hosvd, HooiConfig, TuckerModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> DenseTensor<f64> {
    DenseTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn random_orthonormal(n: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q().columns(0, r).into_owned()
}

fn random_tucker(dims: &[usize], ranks: &[usize], rng: &mut ChaCha8Rng) -> TuckerModel<f64> {
    let core = random_tensor(ranks.to_vec(), rng);
    let factors = dims.iter().zip(ranks).map(|(&n, &r)| random_orthonormal(n, r, rng)).collect();
    TuckerModel::new(core, factors).unwrap()
}

fn residual(t: &DenseTensor<f64>, m: &TuckerModel<f64>) -> f64 {
    t.zip_with(&m.reconstruct(), |a, b| a - b).unwrap().frobenius_norm()
}

fn defect(u: &DMatrix<f64>) -> f64 {
    (u.transpose() * u - DMatrix::identity(u.ncols(), u.ncols())).amax()
}

fn tucker_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let shapes: [&[usize]; 4] = [&[3, 4], &[2, 3, 4], &[3, 2, 4, 5], &[2, 3, 2, 2, 3]];
    for dims in shapes {
        let t = random_tensor(dims.to_vec(), &mut rng);
        for k in 0..dims.len() {
            let back = DenseTensor::fold(&t.unfold(k).unwrap(), k, dims).unwrap();
            if back != t {
                return Err(format!("fold/unfold mismatch on {dims:?} mode {k}"));
            }
        }
    }
    let (mut worst_defect, mut worst_full, mut worst_gap) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..50 {
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(2..7)).collect();
        let ranks: Vec<usize> = dims.iter().map(|&d| rng.random_range(1..=d)).collect();
        let t = random_tensor(dims.clone(), &mut rng);
        let (h, _) = hooi(&t, &ranks, HooiConfig::default()).unwrap();
        for u in h.factors() {
            worst_defect = worst_defect.max(defect(u));
        }
        worst_gap = worst_gap.max(residual(&t, &h) - residual(&t, &hosvd(&t, &ranks).unwrap()));
        let (full, _) = hooi(&t, &dims, HooiConfig::default()).unwrap();
        worst_full = worst_full.max(residual(&t, &full) / t.frobenius_norm());
    }
    ensure(
        worst_defect <= 1e-10 && worst_full <= 1e-8 && worst_gap <= 1e-12,
        format!("orthonormality defect {worst_defect:.1e}, full-rank rel error {worst_full:.1e}, max HOOI−HOSVD error {worst_gap:.1e}"),
    )
}

fn weight_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(2..6)).collect();
        let ranks: Vec<usize> = dims.iter().map(|&d| rng.random_range(1..=d)).collect();
        let m = random_tucker(&dims, &ranks, &mut rng);
        let w = basis_weights(&m).unwrap();
        let (g, ux) = (m.core(), m.factor(3));
        let [rs, rm, ry, rx] = [ranks[0], ranks[1], ranks[2], ranks[3]];
        for i in 0..dims[3] {
            for jy in 0..ry {
                for jm in 0..rm {
                    for js in 0..rs {
                        let mut direct = 0.0;
                        for jx in 0..rx {
                            direct += ux[(i, jx)] * g.get(&[js, jm, jy, jx]);
                        }
                        worst = worst.max((w[(i, js + rs * (jm + rm * jy))] - direct).abs());
                    }
                }
            }
        }
        // the weights applied to the rank-one bases give back the design slices
        let rec = m.reconstruct();
        let f = m.factors();
        for i in 0..dims[3] {
            for y in 0..dims[2] {
                for mo in 0..dims[1] {
                    for s in 0..dims[0] {
                        let mut v = 0.0;
                        for jy in 0..ry {
                            for jm in 0..rm {
                                for js in 0..rs {
                                    v += w[(i, js + rs * (jm + rm * jy))] * f[0][(s, js)] * f[1][(mo, jm)] * f[2][(y, jy)];
                                }
                            }
                        }
                        worst = worst.max((rec.get(&[s, mo, y, i]) - v).abs());
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-10, format!("max abs error {worst:.1e} over 20 models"))
}

/// Dense `[n·n_x × r·n_x]` operator: row `e + n·i`, column `j·n_x + i` holds
/// `Σ_{js,jm,jy} Us[s,js] Um[m,jm] Uy[y,jy] G[js,jm,jy,j]`.
fn dense_operator(core: &DenseTensor<f64>, us: &DMatrix<f64>, um: &DMatrix<f64>, uy: &DMatrix<f64>, nx: usize) -> DMatrix<f64> {
    let (ns, nm, ny) = (us.nrows(), um.nrows(), uy.nrows());
    let cd = core.dims();
    let n = ns * nm * ny;
    let mut c = DMatrix::zeros(n * nx, cd[3] * nx);
    for j in 0..cd[3] {
        for y in 0..ny {
            for m in 0..nm {
                for s in 0..ns {
                    let mut v = 0.0;
                    for jy in 0..cd[2] {
                        for jm in 0..cd[1] {
                            for js in 0..cd[0] {
                                v += us[(s, js)] * um[(m, jm)] * uy[(y, jy)] * core.get(&[js, jm, jy, j]);
                            }
                        }
                    }
                    let e = s + ns * (m + nm * y);
                    for i in 0..nx {
                        c[(e + n * i, j * nx + i)] = v;
                    }
                }
            }
        }
    }
    c
}

fn gram_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let m = random_tucker(&[4, 3, 2, 5], &[2, 2, 1, 3], &mut rng);
    let f = m.factors();
    let c = dense_operator(m.core(), &f[0], &f[1], &f[2], 5);
    let sf_err = (reduced_gram(&m).unwrap() - c.transpose() * &c).amax();

    let (ns_hf, nm, ny, nx) = (6, 3, 2, 4);
    let lf = random_tucker(&[5, nm, ny, 7], &[2, 2, 2, 2], &mut rng);
    let us_tilde = DMatrix::from_fn(ns_hf, 2, |_, _| rng.random_range(-1.0..1.0));
    let disc = random_tucker(&[ns_hf, nm, ny, nx], &[2, 2, 1, 2], &mut rng);
    let parts = MfParts {
        core: lf.core().clone(),
        us_tilde: us_tilde.clone(),
        um: lf.factor(1).clone(),
        uy: lf.factor(2).clone(),
        disc: disc.clone(),
    };
    let a = dense_operator(&parts.core, &us_tilde, &parts.um, &parts.uy, nx);
    let df = disc.factors();
    let b = dense_operator(disc.core(), &df[0], &df[1], &df[2], nx);
    let mut k = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    k.columns_mut(0, a.ncols()).copy_from(&a);
    k.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
    let mf_err = (mf_reduced_gram(&parts, nx).unwrap() - k.transpose() * &k).amax();
    ensure(
        sf_err <= 1e-10 && mf_err <= 1e-10 && k.len() <= 10_000,
        format!("CᵀC error {sf_err:.1e}, KᵀK error {mf_err:.1e}"),
    )
}

fn weight_map(h: &DMatrix<f64>, nx: usize) -> DMatrix<f64> {
    let (n, r) = h.shape();
    let mut c = DMatrix::zeros(n * nx, r * nx);
    for j in 0..r {
        for i in 0..nx {
            c.view_mut((i * n, j * nx + i), (n, 1)).copy_from(&h.column(j));
        }
    }
    c
}

fn spread(d: &[f64]) -> f64 {
    d.iter().map(|a| d.iter().map(|b| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max)
}

fn tiny_mcmc() -> McmcConfig {
    McmcConfig { n_chains: 1, n_iter: 20, burn_in: 10, ..McmcConfig::default() }
}

fn sf_reduction() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let nx = 5;
    let design = DesignMatrix::new((0..nx).map(|_| vec![rng.random_range(0.0..1.0)]).collect()).unwrap();
    let z = random_tensor(vec![4, 3, 2, nx], &mut rng);
    let opts = SfOptions { mcmc: tiny_mcmc(), ..SfOptions::default() };
    let emu = SfEmulator::fit_with_ranks(&z, &design, &[2, 2, 1, 3], HooiConfig::default(), &opts).unwrap();
    let c = weight_map(&field_basis(&emu.tucker).unwrap(), nx);
    let zv = z.vectorize();
    let settings = [([1.0, 2.0, 0.5], 0.3, 4.0), ([5.0, 0.7, 3.0], 1.2, 0.8), ([0.2, 9.0, 1.5], 0.05, 25.0)];
    settings
        .iter()
        .map(|(prec, ls, lambda)| {
            let d = SfDraw { gps: prec.iter().map(|&p| GpHyperparams::new(p, vec![*ls]).unwrap()).collect(), lambda: *lambda };
            let r = d.gps.len();
            let mut sigma = DMatrix::zeros(r * nx, r * nx);
            for (j, hp) in d.gps.iter().enumerate() {
                sigma.view_mut((j * nx, j * nx), (nx, nx)).copy_from(&cov_symmetric(&design, hp));
            }
            let n = c.nrows();
            let cov = &c * sigma * c.transpose() + DMatrix::identity(n, n) / d.lambda;
            mvn_logpdf(&zv, &DVector::zeros(n), &cov).unwrap() - emu.reduced_log_likelihood(&d).unwrap()
        })
        .collect()
}

fn mf_reduction() -> Vec<f64> {
    let lf_pts = toy_mesh(2);
    let hf_pts = vec![vec![0.2, 0.1], vec![0.7, 0.3], vec![0.4, 0.8], vec![0.9, 0.9]];
    let (n_lf, n_hf) = (5, 3);
    let x_lf = DesignMatrix::new((0..n_lf).map(|i| vec![i as f64 / (n_lf - 1) as f64]).collect()).unwrap();
    let x_hf = x_lf.select(&[0, 2, 4]).unwrap();
    let toy = MfToy::new(3, 2, 0.3, 5);
    let z_lf = toy.ensemble(&x_lf, &lf_pts, false, 0.05, 1);
    let z_hf = toy.ensemble(&x_hf, &hf_pts, true, 0.05, 2);
    let opts = MfOptions { mcmc: tiny_mcmc(), ..MfOptions::default() };
    let emu = MfEmulator::fit(
        &z_lf,
        &z_hf,
        &x_lf,
        &x_hf,
        &MeshCoords::new(lf_pts).unwrap(),
        &MeshCoords::new(hf_pts).unwrap(),
        &[2, 2, 2, 2],
        &[2, 2, 1, 2],
        &opts,
    )
    .unwrap();
    let c = weight_map(&field_basis(&emu.lf.tucker).unwrap(), n_lf);
    let k = weight_map(&emu.parts.hf_field_basis().unwrap(), n_hf);
    let z = DVector::from_iterator(c.nrows() + k.nrows(), z_lf.values().iter().chain(z_hf.values()).copied());
    let draw = |pg: [f64; 2], pz: [f64; 2], ls: f64, le: f64, ld: f64| MfDraw {
        gamma: pg.iter().map(|&p| GpHyperparams::new(p, vec![ls]).unwrap()).collect(),
        zeta: pz.iter().map(|&p| GpHyperparams::new(p, vec![ls * 1.3]).unwrap()).collect(),
        lambda_eta: le,
        lambda_delta: ld,
    };
    let settings = [
        draw([1.0, 3.0], [2.0, 0.5], 0.4, 5.0, 8.0),
        draw([0.3, 1.0], [5.0, 1.5], 0.9, 1.0, 30.0),
        draw([4.0, 0.2], [0.7, 9.0], 0.15, 20.0, 2.0),
    ];
    let (r, rp) = (2, 2);
    settings
        .iter()
        .map(|d| {
            // latent order: LF weights, HF-design LF weights, discrepancy weights
            let nl = r * n_lf;
            let nlat = nl + (r + rp) * n_hf;
            let mut sigma = DMatrix::zeros(nlat, nlat);
            for (j, h) in d.gamma.iter().enumerate() {
                let (a, b) = (j * n_lf, nl + j * n_hf);
                sigma.view_mut((a, a), (n_lf, n_lf)).copy_from(&cov_symmetric(&x_lf, h));
                sigma.view_mut((b, b), (n_hf, n_hf)).copy_from(&cov_symmetric(&x_hf, h));
                let cross = cov_matrix(&x_lf, &x_hf, h).unwrap();
                sigma.view_mut((a, b), (n_lf, n_hf)).copy_from(&cross);
                sigma.view_mut((b, a), (n_hf, n_lf)).copy_from(&cross.transpose());
            }
            for (j, h) in d.zeta.iter().enumerate() {
                let b = nl + (r + j) * n_hf;
                sigma.view_mut((b, b), (n_hf, n_hf)).copy_from(&cov_symmetric(&x_hf, h));
            }
            let mut op = DMatrix::zeros(z.len(), nlat);
            op.view_mut((0, 0), c.shape()).copy_from(&c);
            op.view_mut((c.nrows(), nl), k.shape()).copy_from(&k);
            let mut cov = &op * sigma * op.transpose();
            for i in 0..cov.nrows() {
                cov[(i, i)] += if i < c.nrows() { 1.0 / d.lambda_eta } else { 1.0 / d.lambda_delta };
            }
            mvn_logpdf(&z, &DVector::zeros(z.len()), &cov).unwrap() - emu.reduced_log_likelihood(d).unwrap()
        })
        .collect()
}

fn reduction_equivalence() -> Outcome {
    let (sf, mf) = (sf_reduction(), mf_reduction());
    ensure(
        spread(&sf) <= 1e-6 && spread(&mf) <= 1e-6,
        format!("single-fidelity Δ spread {:.1e}, multi-fidelity Δ spread {:.1e}", spread(&sf), spread(&mf)),
    )
}

fn textbook_rhat(chains: &[Vec<f64>]) -> f64 {
    let mut seqs = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        seqs.push(c[..h].to_vec());
        seqs.push(c[c.len() - h..].to_vec());
    }
    let m = seqs.len() as f64;
    let n = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>() / (m - 1.0);
    let mut w = 0.0;
    for (s, mu) in seqs.iter().zip(&means) {
        w += s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
    }
    w /= m;
    (((n - 1.0) * w / n + b / n) / w).sqrt()
}

fn batch_se(chains: &[Vec<f64>]) -> (f64, f64) {
    let all: Vec<f64> = chains.concat();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let batches: Vec<f64> = chains
        .iter()
        .flat_map(|c| {
            let bl = c.len() / 20;
            (0..20).map(move |b| c[b * bl..(b + 1) * bl].iter().sum::<f64>() / bl as f64)
        })
        .collect();
    let k = batches.len() as f64;
    let var = batches.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

fn conditioning_and_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut cond_err = 0.0f64;
    for _ in 0..10 {
        let (no, np) = (6, 3);
        let a = DMatrix::from_fn(no + np, no + np, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(no + np, no + np) * 0.5;
        let soo = s.view((0, 0), (no, no)).into_owned();
        let sop = s.view((0, no), (no, np)).into_owned();
        let spp = s.view((no, no), (np, np)).into_owned();
        let y = DVector::from_fn(no, |_, _| rng.random_range(-2.0..2.0));
        let (mean, cov) = mvn_condition(&soo, &sop, &spp, &y).unwrap();
        let inv = soo.clone().try_inverse().unwrap();
        let m0 = sop.transpose() * &inv * &y;
        let c0 = &spp - sop.transpose() * &inv * &sop;
        cond_err = cond_err.max((mean - m0).amax()).max((cov - c0).amax());
    }

    // log-normal(0, 1) target on the natural scale
    let target = FnTarget::new(vec!["theta".into()], |p: &[f64]| {
        let l = p[0].ln();
        Ok(-l - 0.5 * (std::f64::consts::TAU).ln() - 0.5 * l * l)
    });
    let cfg = McmcConfig { n_chains: 4, n_iter: 20_000, burn_in: 2_000, seed: 17, ..McmcConfig::default() };
    let samples = run_chains(&target, &[1.0], None, &cfg).unwrap();
    let theta: Vec<Vec<f64>> = samples.draws.iter().map(|c| c.iter().map(|d| d[0]).collect()).collect();
    let logs: Vec<Vec<f64>> = theta.iter().map(|c| c.iter().map(|v| v.ln()).collect()).collect();
    let sq: Vec<Vec<f64>> = logs.iter().map(|c| c.iter().map(|v| v * v).collect()).collect();
    let mut moments = Vec::new();
    for (name, chains, truth) in [("E[θ]", &theta, 0.5f64.exp()), ("E[ln θ]", &logs, 0.0), ("E[ln² θ]", &sq, 1.0)] {
        let (m, se) = batch_se(chains);
        moments.push((name, m, truth, se, (m - truth).abs() <= 3.0 * se));
    }

    let mut rhat_err = 0.0f64;
    for _ in 0..20 {
        let nc = rng.random_range(2..6);
        let len = rng.random_range(4..200);
        let chains: Vec<Vec<f64>> = (0..nc)
            .map(|c| (0..len).map(|_| rng.random_range(-1.0..1.0) + 0.1 * c as f64).collect())
            .collect();
        rhat_err = rhat_err.max((split_rhat(&chains).unwrap() - textbook_rhat(&chains)).abs());
    }

    let detail = moments
        .iter()
        .map(|(n, m, t, se, _)| format!("{n} {m:.4} vs {t:.4} (se {se:.4})"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        cond_err <= 1e-8 && rhat_err <= 1e-10 && moments.iter().all(|m| m.4),
        format!("conditioning error {cond_err:.1e}; {detail}; split-R̂ error {rhat_err:.1e}"),
    )
}

fn transform_suite() -> Outcome {
    let s = TransformSpec::<f64>::default();
    let n = 10_000;
    let grid: Vec<f64> = (0..n).map(|i| 0.01 + 0.98 * i as f64 / (n - 1) as f64).collect();
    let f: Vec<f64> = grid.iter().map(|&x| s.forward(x).unwrap()).collect();
    let round = grid.iter().zip(&f).map(|(x, y)| (s.inverse(*y).unwrap() - x).abs()).fold(0.0, f64::max);
    let monotone = f.windows(2).all(|w| w[1] > w[0]);
    let pts: Vec<(f64, f64)> = grid.iter().zip(&f).filter(|(x, _)| **x >= 0.1).map(|(x, y)| (*x, *y)).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let dev = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).abs()).fold(0.0, f64::max);
    let ratio = dev / (pts[pts.len() - 1].1 - pts[0].1);
    ensure(
        round <= 1e-6 && monotone && ratio < 0.05,
        format!("round trip {round:.1e}, strictly increasing {monotone}, linearity ratio {ratio:.1e}"),
    )
}

fn full_scale() -> bool {
    std::env::var("MFT_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn study_config() -> (SynthConfig, EvalConfig) {
    let mut cfg = EvalConfig::default();
    let iters = if full_scale() { 4000 } else { 1500 };
    cfg.mcmc.n_iter = iters;
    cfg.mcmc.burn_in = iters / 2;
    let synth = if full_scale() { SynthConfig::default() } else { SynthConfig::reduced() };
    (synth, cfg)
}

fn study_data(d: &SynthData) -> StudyData<'_> {
    StudyData {
        z_lf: &d.z_lf,
        z_hf: &d.z_hf,
        x_lf: &d.lf_design,
        x_hf: &d.hf_design,
        lf_mesh: &d.lf_mesh,
        hf_mesh: &d.hf_mesh,
    }
}

fn synthetic_study() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let (synth, cfg) = study_config();
    let data = generate(&synth).unwrap();
    let kinds = [EmulatorKind::Lf, EmulatorKind::Hf, EmulatorKind::Mf];
    let report = holdout_study(&study_data(&data), data.test_design.as_ref().unwrap(), data.z_test.as_ref().unwrap(), &kinds, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let m = |k| report.get(k).map(|r| r.overall.clone());
    let (Some(lf), Some(hf), Some(mf)) = (m(EmulatorKind::Lf), m(EmulatorKind::Hf), m(EmulatorKind::Mf)) else {
        let msg = format!("fits failed: {:?}", report.fit_failures);
        return (Err(msg.clone()), Err(msg));
    };
    let scale = if full_scale() { "full" } else { "reduced" };
    let budget = if full_scale() { 3600.0 } else { 600.0 };
    let ok = mf.mse < lf.mse
        && mf.mse < hf.mse
        && (0.85..=0.99).contains(&mf.coverage)
        && lf.coverage < mf.coverage
        && mf.sd < hf.sd
        && secs <= budget;
    let study = ensure(
        ok,
        format!(
            "{scale}: MSE LF {:.3e} HF {:.3e} MF {:.3e}; coverage LF {:.3} MF {:.3}; SD HF {:.4} MF {:.4}; {secs:.0}s",
            lf.mse, hf.mse, mf.mse, lf.coverage, mf.coverage, hf.sd, mf.sd
        ),
    );

    let ls = |j: usize, input: &str| {
        report
            .lengthscales
            .iter()
            .find(|r| r.component == "LF" && r.weight == j && r.input == input)
            .map(|r| r.mean)
            .unwrap_or(f64::NAN)
    };
    let n_weights = report.lengthscales.iter().filter(|r| r.component == "LF" && r.input == "x1").count();
    let wins = (1..=n_weights).filter(|&j| ls(j, "x3") > ls(j, "x1") && ls(j, "x3") > ls(j, "x2")).count();
    let inert = ensure(wins >= 3, format!("x3 has the largest length scale for {wins} of {n_weights} LF weights"));
    (study, inert)
}

/// Fraction of predictive-mean entries where LF and MF agree within two
/// Monte-Carlo standard errors, and the largest |Δ|/SE.
fn mean_agreement(data: &SynthData, z_hf: &DenseTensor<f64>, cfg: &EvalConfig) -> Result<(usize, usize, f64), String> {
    let study = StudyData { z_hf, ..study_data(data) };
    let fitted = FittedSet::fit(&study, &[EmulatorKind::Lf, EmulatorKind::Mf], cfg).map_err(|e| e.to_string())?;
    if !fitted.failures.is_empty() {
        return Err(format!("fits failed: {:?}", fitted.failures));
    }
    let x = data.test_design.as_ref().unwrap();
    let lf = fitted.predict(EmulatorKind::Lf, x, cfg.n_draws, 1).map_err(|e| e.to_string())?;
    let mf = fitted.predict(EmulatorKind::Mf, x, cfg.n_draws, 2).map_err(|e| e.to_string())?;
    let (mut total, mut within, mut worst) = (0usize, 0usize, 0.0f64);
    for (a, b) in lf.iter().zip(&mf) {
        let n = a.n_draws as f64;
        for e in 0..a.mean.len() {
            let (sa, sb) = (a.sd.values()[e], b.sd.values()[e]);
            let se = ((sa * sa + sb * sb) / n).sqrt();
            let z = (a.mean.values()[e] - b.mean.values()[e]).abs() / se;
            total += 1;
            within += usize::from(z <= 2.0);
            worst = worst.max(z);
        }
    }
    Ok((within, total, worst))
}

fn zero_discrepancy() -> Outcome {
    let mut synth = SynthConfig::reduced();
    synth.discrepancy_scale = 0.0;
    let mut cfg = EvalConfig::default();
    cfg.mcmc.n_iter = 1500;
    cfg.mcmc.burn_in = 750;
    let data = generate(&synth).unwrap();
    let (within, total, worst) = mean_agreement(&data, &data.z_hf, &cfg)?;

    // HF runs replaced by the interpolated LF runs, so the discrepancy is zero
    // in the model's own sense rather than only in the simulator's
    let interp: Vec<DenseTensor<f64>> = (0..data.hf_design.n())
        .map(|i| interpolate_field(&data.z_lf.slice_last(i).unwrap(), &synth, 3).unwrap())
        .collect();
    let (w0, t0, worst0) = mean_agreement(&data, &DenseTensor::stack(&interp).unwrap(), &cfg)?;
    let pct = |a: usize, b: usize| 100.0 * a as f64 / b as f64;
    ensure(
        within == total,
        format!(
            "{within} of {total} entries within 2 Monte-Carlo SE ({:.1}%), largest |Δ|/SE {worst:.1}; \
             with HF = interpolated LF: {:.1}%, largest {worst0:.1}",
            pct(within, total),
            pct(w0, t0)
        ),
    )
}

fn determinism() -> Outcome {
    let data = generate(&SynthConfig {
        grid_lf: 4,
        grid_hf: 8,
        n_months: 3,
        n_years: 2,
        n_lf: 12,
        n_hf: 4,
        n_test: 0,
        lhs_candidates: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = EvalConfig {
        lf_ranks: RankChoice::Explicit(vec![3, 2, 2, 3]),
        hf_ranks: RankChoice::Explicit(vec![3, 2, 2, 2]),
        disc_ranks: RankChoice::Explicit(vec![2, 2, 1, 2]),
        mcmc: McmcConfig { n_chains: 2, n_iter: 300, burn_in: 150, seed: 9, ..McmcConfig::default() },
        n_draws: 120,
        ..EvalConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        loocv(&study_data(&data), &EmulatorKind::ALL, &cfg).unwrap().write_csvs(d.path()).unwrap();
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).ok() != std::fs::read(dirs[1].path().join(n)).ok())
        .collect();
    ensure(
        !names.is_empty() && differing.is_empty(),
        format!("{} CSV files compared, differing: {differing:?}", names.len()),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome| {
        match &r {
            Ok(msg) => println!("PASS  {n:>2}. {name}: {msg}"),
            Err(msg) => println!("FAIL  {n:>2}. {name}: {msg}"),
        }
        failed += usize::from(r.is_err());
    };
    let guarded = |f: &dyn Fn() -> Outcome| {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        })
    };

    report(1, "Tucker suite", guarded(&tucker_suite));
    report(2, "basis-weight identity", guarded(&weight_identity));
    report(3, "structured Gram oracles", guarded(&gram_oracles));
    report(4, "reduction equivalence", guarded(&reduction_equivalence));
    report(5, "conditioning and MCMC", guarded(&conditioning_and_sampling));
    report(6, "transform suite", guarded(&transform_suite));
    let (study, inert) = catch_unwind(AssertUnwindSafe(synthetic_study))
        .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    report(7, "synthetic study", study);
    report(8, "inert-input length scales", inert);
    report(9, "zero-discrepancy agreement", guarded(&zero_discrepancy));
    report(10, "loocv determinism", guarded(&determinism));

    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 && std::env::var("MFT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
