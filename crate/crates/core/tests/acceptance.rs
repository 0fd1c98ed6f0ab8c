//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Tests share a lock so the reported runtimes are not inflated by
//! concurrent execution.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fracal::calibration::{
    build_dataset, calibrate, calibrate_all, dataset_spec, fit_tangent_emulator, generate_rves, macro_point_driver,
    simulate_level, validate_against, write_calibration_csv, write_dataset_csv, write_macro_history_csv,
    write_validation_csv, CalibrationOptions, CalibrationRecord, DamageBounds, ErrorPair, ResponseEmulator, Rve,
    SimConfig, ValidationResult, DNS_LEVEL,
};
use fracal::condensation::{assemble_elastic, effective_tangent, schur_reduce, write_tangent_csv};
use fracal::config::{stream, PipelineConfig};
use fracal::fem::VoxelModel;
use fracal::gp::{gauss_corr, neg_log_likelihood, relative_error, GpModel, MeanBasis};
use fracal::lmgp::{fit_lmgp, latent_corr, CategoricalSpec, LmgpConfig, LmgpModel, MixedSample};
use fracal::material::{damage_value, elastic_tangent, DamageParams, MaterialProps};
use fracal::microstructure::{reconstruct, voxelize, ReconstructionConfig, RveDescriptors, VoxelMesh};
use fracal::optim::OptimOptions;
use fracal::rve_solver::{macro_damage, MacroLoad, ResponseCurve};
use fracal::sobol::SobolSequence;
use fracal::util::{derive_seed, median};
use fracal::Error;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct Check {
    id: u32,
    name: &'static str,
    start: Instant,
    budget: Duration,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new(id: u32, name: &'static str, budget_s: u64) -> Self {
        Check {
            id,
            name,
            start: Instant::now(),
            budget: Duration::from_secs(budget_s),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(mut self) {
        let elapsed = self.start.elapsed();
        self.expect(
            elapsed <= self.budget,
            format!("runtime {:.1}s within {}s", elapsed.as_secs_f64(), self.budget.as_secs()),
        );
        let verdict = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut report = format!("criterion {:>2} [{}]: {verdict} ({:.1}s)\n", self.id, self.name, elapsed.as_secs_f64());
        for n in &self.notes {
            report += &format!("    ok   {n}\n");
        }
        for f in &self.failures {
            report += &format!("    FAIL {f}\n");
        }
        // Written to the raw handle so the verdict shows without --nocapture.
        let _ = std::io::stderr().lock().write_all(report.as_bytes());
        assert!(self.failures.is_empty(), "criterion {} failed: {:?}", self.id, self.failures);
    }
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_damage_law() {
    let _g = serial();
    let mut c = Check::new(1, "damage law", 1);
    let p = DamageParams::new(0.03, 100.0);
    c.expect(damage_value(0.03, &p) == 0.0, "D at the critical strain is exactly 0");
    let d = damage_value(0.06, &p);
    let closed = 1.0 - 0.5 * (-3.0f64).exp();
    c.expect((d - closed).abs() <= 1e-9, format!("D(0.06; 0.03, 100) = {d:.12} matches 1 - exp(-3)/2 within 1e-9"));
    c.expect(format!("{d:.5}") == "0.97511", format!("D(0.06; 0.03, 100) rounds to 0.97511 ({d:.5})"));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut violations = 0;
    for _ in 0..1000 {
        let p = DamageParams::new(rng.random_range(0.01..0.03), rng.random_range(10.0..100.0));
        let a: f64 = rng.random_range(0.0..0.2);
        let b = a + rng.random_range(0.0..0.1);
        let (da, db) = (damage_value(a, &p), damage_value(b, &p));
        if !(da <= db && (0.0..=1.0).contains(&da) && (0.0..=1.0).contains(&db)) {
            violations += 1;
        }
    }
    c.expect(violations == 0, format!("monotone and bounded on 1000 random cases ({violations} violations)"));
    c.finish();
}

// ---------------------------------------------------------------- 2

/// Conjugate gradients on the free block of `k` with prescribed values.
fn cg_reactions(k: &fracal::sparse::SymSparse, prescribed: &[usize], up: &[f64]) -> Vec<f64> {
    let n = k.dim();
    let mut is_p = vec![false; n];
    for &d in prescribed {
        is_p[d] = true;
    }
    let mut u = vec![0.0; n];
    for (&d, &v) in prescribed.iter().zip(up) {
        u[d] = v;
    }
    let ku = k.mul(&u);
    let mut r: Vec<f64> = (0..n).map(|i| if is_p[i] { 0.0 } else { -ku[i] }).collect();
    let diag: Vec<f64> = {
        let mut d = vec![0.0; n];
        for (row, col, v) in k.entries() {
            if row == col {
                d[row] = v;
            }
        }
        d
    };
    let precond = |r: &[f64]| -> Vec<f64> { (0..n).map(|i| if is_p[i] { 0.0 } else { r[i] / diag[i] }).collect() };
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let r0 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _ in 0..20 * n {
        let mut kp = k.mul(&p);
        for i in 0..n {
            if is_p[i] {
                kp[i] = 0.0;
            }
        }
        let alpha = rz / p.iter().zip(&kp).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * kp[i];
        }
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-15 * r0 {
            break;
        }
        z = precond(&r);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        for i in 0..n {
            p[i] = z[i] + rz_new / rz * p[i];
        }
        rz = rz_new;
    }
    let f = k.mul(&u);
    prescribed.iter().map(|&d| f[d]).collect()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    num / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn criterion_02_condensation_oracle() {
    let _g = serial();
    let mut c = Check::new(2, "condensation oracle", 30);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = rng.random_range(10..=200);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let m = &a * a.transpose() + DMatrix::identity(n, n);
        let trip: Vec<(usize, usize, f64)> = (0..n).flat_map(|j| (j..n).map(move |i| (i, j))).map(|(i, j)| (i, j, m[(i, j)])).collect();
        let k = fracal::sparse::SymSparse::from_triplets(n, &trip);
        let np = rng.random_range(1..n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let pres = &idx[..np];
        let up: Vec<f64> = (0..np).map(|_| rng.random::<f64>() - 0.5).collect();
        // dense oracle: K_pp u_p - K_pf K_ff^-1 K_fp u_p
        let free = &idx[np..];
        let kff = DMatrix::from_fn(n - np, n - np, |i, j| m[(free[i], free[j])]);
        let kfp = DMatrix::from_fn(n - np, np, |i, j| m[(free[i], pres[j])]);
        let kpp = DMatrix::from_fn(np, np, |i, j| m[(pres[i], pres[j])]);
        let upv = DVector::from_column_slice(&up);
        let uf = -kff.cholesky().unwrap().solve(&(&kfp * &upv));
        let reactions = kfp.transpose() * uf + kpp * &upv;
        let kr = schur_reduce(&k, pres).unwrap();
        let got = kr * upv;
        let e = rel_diff(got.as_slice(), reactions.as_slice());
        worst = worst.max(e);
        if e > 1e-10 {
            c.expect(false, format!("random system {trial} (n={n}) error {e:.2e}"));
        }
    }
    c.expect(worst <= 1e-10, format!("20 random SPD systems: worst relative error {worst:.2e}"));

    let props = MaterialProps::default();
    let cel = elastic_tangent(&props).unwrap();
    let mut worst: f64 = 0.0;
    let mut built = 0;
    let mut seed = 0;
    while built < 5 {
        seed += 1;
        let res = [8, 10, 12][built % 3];
        let d = RveDescriptors::new(0.08 + 0.02 * built as f64, 5 + built, 1.5, 0.35);
        let cfg = ReconstructionConfig { resolution: res, ..Default::default() };
        let Ok(mesh) = reconstruct(&d, seed, &cfg).and_then(|p| voxelize(&p, res)) else { continue };
        built += 1;
        let model = VoxelModel::new(&mesh).unwrap();
        let k = assemble_elastic(&model, &cel);
        let nodes: Vec<usize> = (0..model.n_nodes()).filter(|&a| model.on_boundary[a]).collect();
        let pres: Vec<usize> = nodes.iter().flat_map(|&a| (0..3).map(move |i| 3 * a + i)).collect();
        let up: Vec<f64> = (0..pres.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let kr = schur_reduce(&k, &pres).unwrap();
        let got = &kr * DVector::from_column_slice(&up);
        let want = cg_reactions(&k, &pres, &up);
        let e = rel_diff(got.as_slice(), &want);
        worst = worst.max(e);
    }
    c.expect(worst <= 1e-10, format!("5 voxel RVEs (8^3..12^3): worst relative reaction error {worst:.2e} vs CG full solve"));
    c.finish();
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_pore_free_tangent() {
    let _g = serial();
    let mut c = Check::new(3, "homogenized tangent exactness", 60);
    let (e, nu) = (5.7e4, 0.33);
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    c.expect(format!("{lambda:.4e}") == "4.1597e4", format!("closed-form lambda {lambda:.4e}"));
    c.expect(format!("{mu:.4e}") == "2.1429e4", format!("closed-form mu {mu:.4e}"));
    let t = effective_tangent(&VoxelMesh::solid(10, 1.0), &MaterialProps::default()).unwrap();
    let (rl, rm) = ((t.lambda - lambda).abs() / lambda, (t.mu - mu).abs() / mu);
    c.expect(rl <= 1e-6 && rm <= 1e-6, format!("pore-free RVE: lambda {:.6e} (rel {rl:.1e}), mu {:.6e} (rel {rm:.1e})", t.lambda, t.mu));
    c.finish();
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_porosity_trend() {
    let _g = serial();
    let mut c = Check::new(4, "porosity trend", 600);
    let props = MaterialProps::default();
    let res = 16;
    let mut medians = Vec::new();
    for vf in [0.0, 0.05, 0.10, 0.20] {
        let (mut mus, mut lams) = (Vec::new(), Vec::new());
        if vf == 0.0 {
            let t = effective_tangent(&VoxelMesh::solid(res, 1.0), &props).unwrap();
            mus = vec![t.mu; 5];
            lams = vec![t.lambda; 5];
        } else {
            let d = RveDescriptors::new(vf, 10, 1.5, 0.3);
            let cfg = ReconstructionConfig { resolution: res, ..Default::default() };
            let mut seed = 0;
            while mus.len() < 5 && seed < 50 {
                seed += 1;
                if let Ok(mesh) = reconstruct(&d, seed, &cfg).and_then(|p| voxelize(&p, res)) {
                    let t = effective_tangent(&mesh, &props).unwrap();
                    mus.push(t.mu);
                    lams.push(t.lambda);
                }
            }
        }
        c.expect(mus.len() == 5, format!("vf={vf}: 5 seeds reconstructed"));
        medians.push((vf, median(&mus), median(&lams)));
    }
    for w in medians.windows(2) {
        c.expect(
            w[1].1 <= w[0].1 && w[1].2 <= w[0].2,
            format!(
                "vf {} -> {}: mu {:.1} -> {:.1}, lambda {:.1} -> {:.1}",
                w[0].0, w[1].0, w[0].1, w[1].1, w[0].2, w[1].2
            ),
        );
    }
    c.finish();
}

// ---------------------------------------------------------------- desk study

/// Held-out RVEs at desk scale with DNS and uncalibrated ROM curves.
struct Study {
    cfg: PipelineConfig,
    sim: SimConfig,
    rves: Vec<Rve>,
    dns: Vec<ResponseCurve>,
    /// `rom[i][l]`: RVE `i`, level `l + 1`, reference parameters.
    rom: Vec<Vec<ResponseCurve>>,
}

fn cluster_seed(cfg: &PipelineConfig, rve: usize) -> u64 {
    derive_seed(cfg.stage_seed(stream::CLUSTERING), rve as u64)
}

fn study() -> &'static Study {
    static S: OnceLock<Study> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = PipelineConfig::default();
        let sim = cfg.sim().unwrap();
        let t = Instant::now();
        let (rves, skipped) = generate_rves(10, &cfg.bounds.descriptors, cfg.stage_seed(stream::GENERATE), &sim).unwrap();
        println!("study: {} RVEs at {}^3 ({} draws skipped)", rves.len(), sim.resolution, skipped.len());
        let theta = cfg.theta_dns;
        let mut dns = Vec::new();
        let mut rom: Vec<Vec<ResponseCurve>> = Vec::new();
        for (i, r) in rves.iter().enumerate() {
            dns.push(simulate_level(&r.mesh, DNS_LEVEL, &[theta], 0, &sim).unwrap().remove(0));
            rom.push(
                (1..=3)
                    .map(|l| simulate_level(&r.mesh, l, &[theta], cluster_seed(&cfg, i), &sim).unwrap().remove(0))
                    .collect(),
            );
            println!(
                "study: rve {i} {:?}: DNS UTS {:.2}, ROM UTS {:?} ({:.0}s)",
                r.descriptors,
                dns[i].uts,
                rom[i].iter().map(|c: &ResponseCurve| (c.uts * 100.0).round() / 100.0).collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
        }
        Study { cfg, sim, rves, dns, rom }
    })
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_rom_stiffening_and_convergence() {
    let _g = serial();
    let mut c = Check::new(5, "ROM stiffening + convergence", 3600);
    let s = study();
    let theta = s.cfg.theta_dns;
    let elastic = SimConfig {
        load: MacroLoad::new(Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0005, 0.99975, 0.99975)), 1).unwrap(),
        ..s.sim.clone()
    };
    let ks: Vec<usize> = (1..=3).map(|l| s.sim.fidelity[&l]).collect();
    let mut norms = vec![Vec::new(); 3];
    for i in 0..5 {
        let r = &s.rves[i];
        let dns_el = simulate_level(&r.mesh, DNS_LEVEL, &[theta], 0, &elastic).unwrap().remove(0);
        let s_dns = dns_el.records[1].stress_undamaged;
        for l in 0..3 {
            let rom_el = simulate_level(&r.mesh, l + 1, &[theta], cluster_seed(&s.cfg, i), &elastic).unwrap().remove(0);
            let s_rom = rom_el.records[1].stress_undamaged;
            c.expect(
                s_rom - s_dns >= -1e-8 * s_dns.abs(),
                format!("rve {i} k={}: elastic axial stress ROM {s_rom:.6} >= DNS {s_dns:.6}", ks[l]),
            );
            let rom = &s.rom[i][l];
            c.expect(
                rom.uts >= s.dns[i].uts,
                format!("rve {i} k={}: ROM UTS {:.3} >= DNS UTS {:.3}", ks[l], rom.uts, s.dns[i].uts),
            );
            norms[l].push(ErrorPair::between(rom, &s.dns[i]).unwrap().norm);
        }
    }
    let med: Vec<f64> = norms.iter().map(|v| median(v)).collect();
    c.expect(
        med[0] > med[1] && med[1] > med[2],
        format!("median pre-calibration ||r|| strictly decreasing in k: {:.4} / {:.4} / {:.4} for k = {ks:?}", med[0], med[1], med[2]),
    );
    c.finish();
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_gp_suite() {
    let _g = serial();
    let mut c = Check::new(6, "GP suite", 60);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut min_eig = f64::INFINITY;
    for _ in 0..10 {
        let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.5)).collect();
        let r = DMatrix::from_fn(40, 40, |i, j| gauss_corr(&xs[i], &xs[j], &w));
        min_eig = min_eig.min(r.symmetric_eigenvalues().min());
    }
    c.expect(min_eig >= -1e-10, format!("kernel PSD on 10 random sets (min eigenvalue {min_eig:.2e})"));

    let xs = SobolSequence::new(2, 0).take_points(20);
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * (4.0 * x[0]).sin() + x[1] * x[1]).collect();
    let scale = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let m = GpModel::with_params(&xs, &ys, &[0.5, 0.2], 0.0, MeanBasis::Constant).unwrap();
    let worst = xs.iter().zip(&ys).map(|(x, y)| (m.predict(x).0 - y).abs()).fold(0.0, f64::max);
    c.expect(worst <= 1e-6 * scale, format!("zero-nugget interpolation error {worst:.2e} (scale {scale:.2})"));

    let w = [0.3, -0.4];
    let (_, g) = neg_log_likelihood(&xs, &ys, &w, None, 1e-8, MeanBasis::Constant).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        let h = 1e-4;
        let (mut a, mut b) = (w, w);
        a[k] += h;
        b[k] -= h;
        let fd = (neg_log_likelihood(&xs, &ys, &a, None, 1e-8, MeanBasis::Constant).unwrap().0
            - neg_log_likelihood(&xs, &ys, &b, None, 1e-8, MeanBasis::Constant).unwrap().0)
            / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / g[k].abs());
    }
    c.expect(worst < 1e-5, format!("likelihood gradient vs central differences: max relative error {worst:.2e}"));

    let e1 = relative_error(&[vec![1.1, 2.0]], &[vec![1.0, 2.0]]).unwrap();
    let e2 = relative_error(&[vec![3.0], vec![6.0]], &[vec![4.0], vec![4.0]]).unwrap();
    c.expect((e1 - 0.1 / 5f64.sqrt()).abs() <= 1e-16, format!("E_y single sample exact ({e1})"));
    c.expect(e2 == 0.375, format!("E_y two samples exact ({e2})"));
    c.expect(relative_error(&[vec![1.0]], &[vec![1.0]]).unwrap() == 0.0, "E_y zero for exact predictions");
    c.expect(
        matches!(relative_error(&[vec![1.0]], &[vec![0.0]]), Err(Error::ZeroNorm(0))),
        "E_y rejects zero-norm truth",
    );
    c.finish();
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_lmgp_anchors() {
    let _g = serial();
    let mut c = Check::new(7, "LMGP correlation anchors", 1);
    let a = latent_corr(&[0.06, 0.0]);
    let b = latent_corr(&[0.0, 0.6]);
    c.expect(format!("{a:.4}") == "0.9964", format!("distance 0.06 -> {a:.4}"));
    c.expect(format!("{b:.4}") == "0.6977", format!("distance 0.6 -> {b:.4}"));
    let spec = CategoricalSpec::new(&[("src", 2)]).unwrap();
    let samples: Vec<MixedSample> = (0..6)
        .map(|i| MixedSample { x: vec![i as f64 / 5.0], t: vec![i % 2 + 1], y: (i as f64).sin() })
        .collect();
    let amat = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.06, 0.0]);
    let m = LmgpModel::with_params(&samples, &spec, &[0.0], &amat, 1e-8, None).unwrap();
    let rho = m.source_correlation(&[1], &[2]).unwrap();
    c.expect(rho == (-0.06f64 * 0.06).exp(), format!("model source correlation equals exp(-|dz|^2) exactly ({rho})"));
    c.finish();
}

// ---------------------------------------------------------------- 8

fn hf(x: &[f64]) -> f64 {
    (6.0 * x[0]).sin() + 0.8 * (3.0 * x[1]).cos() + 0.5 * x[0] * x[1]
}

fn source(level: usize, x: &[f64]) -> f64 {
    let gap = (DNS_LEVEL - level) as f64;
    hf(x) + 0.15 * gap * (1.0 + x[0] - 0.5 * x[1]) + 0.05 * gap * (4.0 * x[1]).sin()
}

fn fast_lmgp(seed: u64) -> LmgpConfig {
    LmgpConfig {
        starts: 2,
        seed,
        optim: OptimOptions { max_iterations: 100, ..Default::default() },
        ..Default::default()
    }
}

fn latent_distance(m: &LmgpModel, a: &[usize], b: &[usize]) -> f64 {
    let (za, zb) = (m.latent_map(a).unwrap(), m.latent_map(b).unwrap());
    za.iter().zip(&zb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn criterion_08_lmgp_fusion() {
    let _g = serial();
    let mut c = Check::new(8, "LMGP fusion properties", 1200);
    let two = CategoricalSpec::new(&[("src", 2)]).unwrap();
    let biases = [0.0, 0.2, 0.5, 1.0];
    let mut med_dist = Vec::new();
    for &b in &biases {
        let mut d = Vec::new();
        for rep in 0..10u64 {
            let xs = SobolSequence::new(2, 100 + rep).take_points(60);
            let samples: Vec<MixedSample> = xs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let src = i % 2 + 1;
                    let y = hf(x) + if src == 2 { b * (1.0 + x[0] * x[0]) } else { 0.0 };
                    MixedSample { x: x.clone(), t: vec![src], y }
                })
                .collect();
            let m = fit_lmgp(&samples, &two, &fast_lmgp(rep)).unwrap();
            d.push(latent_distance(&m, &[1], &[2]));
        }
        med_dist.push(median(&d));
        if b == 0.0 {
            let worst = d.iter().cloned().fold(0.0, f64::max);
            c.expect(worst < 0.05, format!("identical sources: latent distance max {worst:.4} over 10 repeats"));
        }
    }
    c.expect(
        med_dist.windows(2).all(|w| w[1] > w[0]),
        format!("bias sweep {biases:?}: median latent distance {med_dist:.4?} increasing"),
    );

    let four = CategoricalSpec::new(&[("fidelity", 4)]).unwrap();
    let test: Vec<Vec<f64>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect()
    };
    let mut med_mae = Vec::new();
    for n in [100usize, 200, 400] {
        let counts = fracal::calibration::allocate_levels(n, &[0.4, 0.3, 0.2, 0.1]).unwrap();
        let mut maes = Vec::new();
        for rep in 0..10u64 {
            let xs = SobolSequence::new(2, 1000 + rep).take_points(n);
            let mut samples = Vec::with_capacity(n);
            let mut it = xs.into_iter();
            for level in (1..=4).rev() {
                for x in it.by_ref().take(counts[level - 1]) {
                    samples.push(MixedSample { y: source(level, &x), x, t: vec![level] });
                }
            }
            let m = fit_lmgp(&samples, &four, &fast_lmgp(rep)).unwrap();
            let mae = test.iter().map(|x| (m.predict(x, &[4]).unwrap().0 - hf(x)).abs()).sum::<f64>() / test.len() as f64;
            maes.push(mae);
        }
        med_mae.push(median(&maes));
    }
    c.expect(
        med_mae[1] <= med_mae[0] && med_mae[2] <= med_mae[1],
        format!("held-out high-fidelity MAE over n = 100/200/400: {med_mae:.4?} non-increasing"),
    );
    c.finish();
}

// ---------------------------------------------------------------- 9

/// Level `j < 4` responds like the reference at `θ + offset`.
struct Offset {
    offset: [f64; 2],
}

fn forward(alpha: f64, e_cr: f64) -> [f64; 2] {
    let (u, v) = ((alpha - 10.0) / 90.0, (e_cr - 0.01) / 0.02);
    [0.15 + 0.45 * u + 0.1 * u * u + 0.25 * v, 0.1 + 0.15 * u + 0.5 * v + 0.1 * v * v]
}

impl ResponseEmulator for Offset {
    fn predict_responses(&self, x: &[f64; 6], level: usize) -> fracal::Result<[f64; 2]> {
        Ok(if level == DNS_LEVEL { forward(x[4], x[5]) } else { forward(x[4] + self.offset[0], x[5] + self.offset[1]) })
    }
}

#[test]
fn criterion_09_calibration_recovery() {
    let _g = serial();
    let mut c = Check::new(9, "calibration recovery", 300);
    let bounds = DamageBounds::default();
    let opts = CalibrationOptions::default();
    c.expect(opts.starts == 10, "10 starts");
    let d = RveDescriptors::new(0.1, 30, 2.0, 0.3);
    for (theta, offset) in [
        (DamageParams::new(0.03, 100.0), [30.0, 0.008]),
        (DamageParams::new(0.025, 70.0), [15.0, 0.004]),
        (DamageParams::new(0.02, 50.0), [-12.0, 0.006]),
    ] {
        let emu = Offset { offset };
        let r = calibrate(&emu, 0, &d, 1, &theta, &bounds, &opts).unwrap();
        let want = (theta.alpha - offset[0], theta.e_cr - offset[1]);
        let ea = (r.alpha_hat - want.0).abs() / bounds.alpha.width();
        let ee = (r.e_cr_hat - want.1).abs() / bounds.e_cr.width();
        c.expect(
            ea <= 0.01 && ee <= 0.01,
            format!(
                "offset {offset:?}: recovered ({:.3}, {:.5}) vs ({:.3}, {:.5}), errors {:.2e}/{:.2e} of box width",
                r.alpha_hat, r.e_cr_hat, want.0, want.1, ea, ee
            ),
        );
        c.expect(r.objective <= r.objective_reference, "objective at optimum <= objective at reference");
    }
    let emu = Offset { offset: [30.0, 0.008] };
    let theta = DamageParams::new(0.03, 100.0);
    let r = calibrate(&emu, 0, &d, DNS_LEVEL, &theta, &bounds, &opts).unwrap();
    c.expect(
        r.alpha_hat == 100.0 && r.e_cr_hat == 0.03 && r.objective == 0.0,
        format!("self-calibration returns ({}, {}) with objective {}", r.alpha_hat, r.e_cr_hat, r.objective),
    );
    c.finish();
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_end_to_end_trends() {
    let _g = serial();
    let mut c = Check::new(10, "end-to-end trend suite", 3 * 3600);
    let s = study();
    let cfg = &s.cfg;
    let t = Instant::now();
    let ds = build_dataset(&cfg.dataset(), &cfg.bounds.descriptors, &cfg.bounds.damage, &s.sim, |i, n| {
        if i % 10 == 0 {
            println!("dataset: {i}/{n} ({:.0}s)", t.elapsed().as_secs_f64());
        }
    })
    .unwrap();
    println!("dataset: {} rows, {} failed design points", ds.samples.len(), ds.failures.len());
    let mixed: Vec<MixedSample> = ds.samples.iter().map(|x| x.to_mixed()).collect();
    let model = fit_lmgp(&mixed, &dataset_spec(), &cfg.lmgp_config()).unwrap();
    for (t, z) in model.latent_positions() {
        println!("latent {t:?}: {z:.4?}");
    }
    let rves: Vec<(usize, RveDescriptors)> = s.rves.iter().map(|r| r.descriptors).enumerate().collect();
    let (records, failures) = calibrate_all(&model, &rves, &[1, 2, 3], &cfg.theta_dns, &cfg.bounds.damage, &cfg.calibration_options());
    c.expect(failures.is_empty(), format!("{} calibration failures", failures.len()));
    let mut rows: Vec<ValidationResult> = Vec::new();
    for r in &records {
        let i = r.rve_id;
        let v = validate_against(&s.rves[i].mesh, r, &cfg.theta_dns, &s.dns[i], cluster_seed(cfg, i), &s.sim).unwrap();
        println!(
            "rve {i} level {}: alpha {:.2} e_cr {:.5} | ||r|| {:.4} -> {:.4}",
            r.level, r.alpha_hat, r.e_cr_hat, v.pre.norm, v.post.norm
        );
        rows.push(v);
    }
    let n_rves = rows.iter().map(|v| v.rve_id).collect::<std::collections::BTreeSet<_>>().len();
    c.expect(n_rves >= 10 && rows.len() >= 30, format!("{n_rves} RVEs x 3 levels validated ({} cases)", rows.len()));
    let improved = rows.iter().filter(|v| v.post.norm < v.pre.norm).count();
    c.expect(
        improved as f64 >= 0.8 * rows.len() as f64,
        format!("post-calibration ||r|| < pre-calibration in {improved}/{} cases", rows.len()),
    );
    let per_level = |f: &dyn Fn(&CalibrationRecord) -> f64| -> Vec<f64> {
        (1..=3).map(|l| median(&records.iter().filter(|r| r.level == l).map(f).collect::<Vec<_>>())).collect()
    };
    let e_med = per_level(&|r| r.e_cr_hat);
    let a_med = per_level(&|r| r.alpha_hat);
    c.expect(
        e_med[0] <= e_med[1] && e_med[1] <= e_med[2] && e_med[2] <= 0.03,
        format!("median e_cr_hat by level {e_med:.5?} increasing and <= 0.03"),
    );
    c.expect(
        a_med[0] <= a_med[1] && a_med[1] <= a_med[2] && a_med[2] <= 100.0,
        format!("median alpha_hat by level {a_med:.2?} increasing and <= 100"),
    );
    c.finish();
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_macro_driver() {
    let _g = serial();
    let mut c = Check::new(11, "macro driver", 300);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact = true;
    for _ in 0..100 {
        let s1 = Vector6::from_fn(|_, _| rng.random_range(-200.0..200.0));
        exact &= macro_damage(&s1, &s1) == Some(0.0) && macro_damage(&Vector6::zeros(), &s1) == Some(1.0);
    }
    c.expect(exact, "D_M(S^d = S^1) = 0 and D_M(S^d = 0) = 1 exactly on 100 random states");

    let sim = SimConfig { resolution: 16, ..SimConfig::default() };
    let d = RveDescriptors::new(0.1, 10, 1.5, 0.3);
    let cfg = ReconstructionConfig { resolution: 16, ..Default::default() };
    let mesh = (1..20).find_map(|s| reconstruct(&d, s, &cfg).and_then(|p| voxelize(&p, 16)).ok()).unwrap();
    let theta = DamageParams::new(0.024, 47.65);
    let h = macro_point_driver(&mesh, 1, &theta, &MacroLoad::uniaxial_stretch(50), 3, &sim).unwrap();
    let dm: Vec<f64> = h.iter().map(|m| m.d_macro).collect();
    c.expect(
        dm.windows(2).all(|w| w[1] >= w[0]) && dm.iter().all(|v| (0.0..=1.0).contains(v)),
        format!("monotone load: D_M non-decreasing in [0, 1], final {:.4}", dm.last().unwrap()),
    );
    c.expect(dm.last().unwrap() > &0.0, "damage develops under the full stretch");
    let small = MacroLoad::new(Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0005, 0.99975, 0.99975)), 5).unwrap();
    let h = macro_point_driver(&mesh, 1, &theta, &small, 3, &sim).unwrap();
    c.expect(h.iter().all(|m| m.d_macro == 0.0), "elastic-range history keeps D_M = 0");
    c.finish();
}

// ---------------------------------------------------------------- 12

fn pipeline_bytes(cfg: &PipelineConfig) -> Vec<(String, Vec<u8>)> {
    let sim = cfg.sim().unwrap();
    let mut out = Vec::new();
    let (rves, _) = generate_rves(cfg.rve.count, &cfg.bounds.descriptors, cfg.stage_seed(stream::GENERATE), &sim).unwrap();
    for (i, r) in rves.iter().enumerate() {
        let mut b = Vec::new();
        r.mesh.write_to(&mut b).unwrap();
        out.push((format!("mesh {i}"), b));
    }
    let tangents: Vec<_> = rves.iter().map(|r| (r.descriptors, effective_tangent(&r.mesh, &cfg.material).unwrap())).collect();
    let mut b = Vec::new();
    write_tangent_csv(&mut b, &tangents).unwrap();
    out.push(("tangents".into(), b));
    let recs: Vec<(RveDescriptors, f64, f64)> = (0..12)
        .map(|i| {
            let x = i as f64 / 11.0;
            (RveDescriptors::new(0.01 + 0.19 * x, 10 + 7 * i, 1.0 + 4.0 * (x * 7.0).fract(), 0.1 + 0.4 * (x * 3.0).fract()), 2.1e4 * (1.0 - x), 4.1e4 * (1.0 - 0.8 * x))
        })
        .collect();
    let emu = fit_tangent_emulator(&recs, &cfg.tangent_config()).unwrap();
    out.push(("tangent emulator".into(), serde_json::to_vec(&emu).unwrap()));

    let ds = build_dataset(&cfg.dataset(), &cfg.bounds.descriptors, &cfg.bounds.damage, &sim, |_, _| {}).unwrap();
    let mut b = Vec::new();
    write_dataset_csv(&mut b, &ds.samples).unwrap();
    out.push(("dataset".into(), b));
    out.push(("dataset log".into(), serde_json::to_vec(&ds.failures).unwrap()));
    let mixed: Vec<MixedSample> = ds.samples.iter().map(|x| x.to_mixed()).collect();
    let model = fit_lmgp(&mixed, &dataset_spec(), &cfg.lmgp_config()).unwrap();
    out.push(("lmgp".into(), model.to_json().unwrap().into_bytes()));
    let mut b = Vec::new();
    model.write_latent_csv(&mut b).unwrap();
    out.push(("latent".into(), b));
    let ids: Vec<(usize, RveDescriptors)> = rves.iter().map(|r| r.descriptors).enumerate().collect();
    let (records, _) = calibrate_all(&model, &ids, &[1, 2, 3], &cfg.theta_dns, &cfg.bounds.damage, &cfg.calibration_options());
    let mut b = Vec::new();
    write_calibration_csv(&mut b, &records).unwrap();
    out.push(("calibration".into(), b));
    let dns = simulate_level(&rves[0].mesh, DNS_LEVEL, &[cfg.theta_dns], 0, &sim).unwrap().remove(0);
    let rows: Vec<_> = records
        .iter()
        .filter(|r| r.rve_id == 0)
        .map(|r| validate_against(&rves[0].mesh, r, &cfg.theta_dns, &dns, cluster_seed(cfg, 0), &sim).unwrap())
        .collect();
    let mut b = Vec::new();
    write_validation_csv(&mut b, &rows).unwrap();
    out.push(("validation".into(), b));
    let h = macro_point_driver(&rves[0].mesh, 1, &records[0].params(), &sim.load, cluster_seed(cfg, 0), &sim).unwrap();
    let mut b = Vec::new();
    write_macro_history_csv(&mut b, &h).unwrap();
    out.push(("macro history".into(), b));
    out
}

#[test]
fn criterion_12_reproducibility() {
    let _g = serial();
    let mut c = Check::new(12, "reproducibility", 1800);
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = PipelineConfig::load(&path).unwrap();
    let a = pipeline_bytes(&cfg);
    let b = pipeline_bytes(&cfg);
    c.expect(a.len() == b.len(), format!("{} artifacts per run", a.len()));
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        c.expect(x == y, format!("{name}: byte-identical ({} bytes)", x.len()));
    }
    c.finish();
}
