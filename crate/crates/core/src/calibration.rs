//! Multi-fidelity dataset construction, tangent emulation, damage-parameter
//! calibration of the ROMs and their validation against DNS.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::VoxelModel;
use crate::gp::{fit_gp, relative_error, GpConfig, GpModel};
use crate::lmgp::{CategoricalSpec, LmgpModel, MixedSample};
use crate::material::{DamageParams, MaterialProps};
use crate::microstructure::{
    reconstruct, sample_descriptors, voxelize, DescriptorBounds, Range, ReconstructionConfig, RveDescriptors, VoxelMesh,
};
use crate::optim::{fd_gradient, multistart, OptimOptions};
use crate::rom::{cluster_elements, run_rom_multi, RomSystem};
use crate::rve_solver::{
    run_dns_multi, stabilized_damage_post, solve_reference_rve_with, MacroLoad, MacroState, ResponseCurve,
    SolverOptions,
};
use crate::sobol::SobolSequence;
use crate::util::derive_seed;

/// Fidelity level of the direct simulation.
pub const DNS_LEVEL: usize = 4;
pub const DATASET_CSV_HEADER: &str = "x1,x2,x3,x4,x5,x6,t1,t2,y";
pub const CALIBRATION_CSV_HEADER: &str = "rve_id,level,alpha_hat,ecr_hat,objective";
pub const VALIDATION_CSV_HEADER: &str =
    "rve_id,level,k,r_uts_pre,r_toughness_pre,r_norm_pre,r_uts_post,r_toughness_post,r_norm_post";

/// Box for the calibrated damage parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamageBounds {
    pub alpha: Range,
    pub e_cr: Range,
}

impl Default for DamageBounds {
    fn default() -> Self {
        DamageBounds {
            alpha: Range::new(10.0, 100.0),
            e_cr: Range::new(0.01, 0.03),
        }
    }
}

impl DamageBounds {
    pub fn validate(&self) -> Result<()> {
        self.alpha.validate("alpha")?;
        self.e_cr.validate("e_cr")?;
        if self.alpha.lo <= 0.0 || self.e_cr.lo <= 0.0 {
            return Err(Error::Config("damage bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, d: &DamageParams) -> bool {
        self.alpha.contains(d.alpha) && self.e_cr.contains(d.e_cr)
    }

    fn to_unit(&self, d: &DamageParams) -> [f64; 2] {
        [
            (d.alpha - self.alpha.lo) / self.alpha.width(),
            (d.e_cr - self.e_cr.lo) / self.e_cr.width(),
        ]
    }

    fn from_unit(&self, u: &[f64]) -> DamageParams {
        DamageParams::new(self.e_cr.scale(u[1]), self.alpha.scale(u[0]))
    }
}

/// Everything needed to turn descriptors into a response curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub resolution: usize,
    pub props: MaterialProps,
    pub load: MacroLoad,
    pub solver: SolverOptions,
    pub reconstruction: ReconstructionConfig,
    /// Cluster count of each ROM level; level 4 is DNS.
    pub fidelity: BTreeMap<usize, usize>,
    /// Reconstruction retries with fresh seeds before a sample is dropped.
    pub max_reseeds: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            resolution: 24,
            props: MaterialProps::default(),
            load: MacroLoad::default(),
            solver: SolverOptions::default(),
            reconstruction: ReconstructionConfig::default(),
            fidelity: default_fidelity(),
            max_reseeds: 2,
        }
    }
}

pub fn default_fidelity() -> BTreeMap<usize, usize> {
    BTreeMap::from([(1, 50), (2, 100), (3, 200)])
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config("resolution must be at least 2".into()));
        }
        self.props.validate()?;
        self.load.validate()?;
        if self.fidelity.contains_key(&DNS_LEVEL) || self.fidelity.keys().any(|&l| l == 0 || l > DNS_LEVEL) {
            return Err(Error::Config("ROM fidelity levels must lie in 1..=3".into()));
        }
        if self.fidelity.values().any(|&k| k == 0) {
            return Err(Error::Config("cluster counts must be positive".into()));
        }
        Ok(())
    }

    /// Cluster count of a ROM level, `None` for DNS.
    pub fn k_of(&self, level: usize) -> Result<Option<usize>> {
        if level == DNS_LEVEL {
            return Ok(None);
        }
        self.fidelity
            .get(&level)
            .map(|&k| Some(k))
            .ok_or_else(|| Error::Config(format!("no cluster count configured for fidelity level {level}")))
    }

    fn reconstruction(&self) -> ReconstructionConfig {
        ReconstructionConfig {
            resolution: self.resolution,
            ..self.reconstruction
        }
    }
}

/// A reconstructed, connected RVE.
#[derive(Debug, Clone)]
pub struct Rve {
    pub descriptors: RveDescriptors,
    pub seed: u64,
    pub attempts: usize,
    pub mesh: VoxelMesh,
}

/// Reconstruct and voxelize, retrying with derived seeds on failure.
pub fn build_rve(desc: &RveDescriptors, seed: u64, sim: &SimConfig) -> Result<Rve> {
    let cfg = sim.reconstruction();
    let mut last = None;
    for attempt in 0..=sim.max_reseeds {
        let s = if attempt == 0 { seed } else { derive_seed(seed, attempt as u64) };
        let built = reconstruct(desc, s, &cfg).and_then(|p| {
            let mesh = voxelize(&p, sim.resolution)?;
            mesh.check_connected()?;
            Ok(mesh)
        });
        match built {
            Ok(mesh) => {
                return Ok(Rve {
                    descriptors: *desc,
                    seed: s,
                    attempts: attempt + 1,
                    mesh,
                })
            }
            Err(e @ (Error::ReconstructionInfeasible { .. } | Error::Disconnected { .. })) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// A descriptor draw that could not be reconstructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDraw {
    pub draw: usize,
    pub descriptors: RveDescriptors,
    pub reason: String,
}

/// `n` reconstructed RVEs from a Sobol descriptor design. Draws that cannot
/// be reconstructed are skipped and the next point is taken, up to `4n`
/// draws in total.
pub fn generate_rves(
    n: usize,
    bounds: &DescriptorBounds,
    seed: u64,
    sim: &SimConfig,
) -> Result<(Vec<Rve>, Vec<SkippedDraw>)> {
    let max_draws = 4 * n.max(1);
    let draws = sample_descriptors(max_draws, bounds, seed)?;
    let mut rves = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    for (i, d) in draws.iter().enumerate() {
        if rves.len() == n {
            break;
        }
        match build_rve(d, derive_seed(seed, i as u64), sim) {
            Ok(r) => rves.push(r),
            Err(e @ (Error::ReconstructionInfeasible { .. } | Error::Disconnected { .. })) => {
                skipped.push(SkippedDraw {
                    draw: i,
                    descriptors: *d,
                    reason: e.to_string(),
                });
                if i + 1 == max_draws {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok((rves, skipped))
}

/// Response curves at one fidelity level for several damage parameter sets
/// (one equilibrium solve, damage applied in post-processing).
pub fn simulate_level(
    mesh: &VoxelMesh,
    level: usize,
    damage: &[DamageParams],
    cluster_seed: u64,
    sim: &SimConfig,
) -> Result<Vec<ResponseCurve>> {
    mesh.check_connected()?;
    let model = VoxelModel::new(mesh)?;
    match sim.k_of(level)? {
        None => run_dns_multi(&model, &sim.props, damage, &sim.load, &sim.solver),
        Some(k) => {
            let clustering = cluster_elements(&model, k, cluster_seed)?;
            run_rom_multi(&model, &clustering, &sim.props, damage, &sim.load, &sim.solver)
        }
    }
}

/// One dataset row in the layout `x1..x6,t1,t2,y` with
/// `x = [vf, np, ar, rd, alpha, e_cr]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: [f64; 6],
    pub t1: usize,
    pub t2: usize,
    pub y: f64,
}

pub fn design_point(desc: &RveDescriptors, theta: &DamageParams) -> [f64; 6] {
    [desc.vf, desc.np as f64, desc.ar, desc.rd, theta.alpha, theta.e_cr]
}

impl Sample {
    pub fn to_mixed(&self) -> MixedSample {
        MixedSample {
            x: self.x.to_vec(),
            t: vec![self.t1, self.t2],
            y: self.y,
        }
    }
}

/// The categorical layout of the dataset: fidelity (4 levels) and response
/// type (1 UTS, 2 toughness).
pub fn dataset_spec() -> CategoricalSpec {
    CategoricalSpec::new(&[("t1", 4), ("t2", 2)]).expect("static spec")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_total: usize,
    /// Share of samples per fidelity level 1..=4.
    pub proportions: [f64; 4],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_total: 120,
            proportions: [0.4, 0.3, 0.2, 0.1],
            seed: 0,
        }
    }
}

/// Simulation count per level 1..=4 by largest remainder.
pub fn allocate_levels(n_total: usize, proportions: &[f64; 4]) -> Result<[usize; 4]> {
    if proportions.iter().any(|p| !(*p >= 0.0)) || (proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("fidelity proportions must be non-negative and sum to 1, got {proportions:?}")));
    }
    let raw: Vec<f64> = proportions.iter().map(|p| p * n_total as f64).collect();
    let mut counts = [0usize; 4];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = (r + 1e-9).floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(b.cmp(&a)));
    let mut left = n_total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Why a design point produced no rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample: usize,
    pub level: usize,
    pub descriptors: RveDescriptors,
    pub stage: String,
    pub exit_code: i32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub failures: Vec<FailureRecord>,
    /// Reconstruction attempts used by each successful design point.
    pub reseeds: Vec<(usize, usize)>,
}

/// Design points in draw order: Sobol over the descriptor and damage boxes,
/// levels assigned in contiguous blocks starting with DNS.
pub fn design_points(
    cfg: &DatasetConfig,
    desc_bounds: &DescriptorBounds,
    dmg_bounds: &DamageBounds,
) -> Result<Vec<(usize, RveDescriptors, DamageParams)>> {
    desc_bounds.validate()?;
    dmg_bounds.validate()?;
    let counts = allocate_levels(cfg.n_total, &cfg.proportions)?;
    let mut seq = SobolSequence::new(6, cfg.seed);
    let mut levels = Vec::with_capacity(cfg.n_total);
    for level in (1..=DNS_LEVEL).rev() {
        levels.extend(std::iter::repeat_n(level, counts[level - 1]));
    }
    Ok(levels
        .into_iter()
        .map(|level| {
            let u = seq.next_point();
            let desc = desc_bounds.scale_unit(&u[..4]);
            let theta = DamageParams::new(dmg_bounds.e_cr.scale(u[5]), dmg_bounds.alpha.scale(u[4]));
            (level, desc, theta)
        })
        .collect())
}

/// Simulate every design point; each success contributes a UTS and a
/// toughness row. Failures are logged and skipped.
pub fn build_dataset(
    cfg: &DatasetConfig,
    desc_bounds: &DescriptorBounds,
    dmg_bounds: &DamageBounds,
    sim: &SimConfig,
    mut progress: impl FnMut(usize, usize),
) -> Result<Dataset> {
    sim.validate()?;
    let points = design_points(cfg, desc_bounds, dmg_bounds)?;
    let mut out = Dataset::default();
    for (i, (level, desc, theta)) in points.iter().enumerate() {
        progress(i, points.len());
        let seed = derive_seed(cfg.seed, i as u64);
        let fail = |stage: &str, e: Error| FailureRecord {
            sample: i,
            level: *level,
            descriptors: *desc,
            stage: stage.into(),
            exit_code: e.exit_code(),
            reason: e.to_string(),
        };
        let rve = match build_rve(desc, seed, sim) {
            Ok(r) => r,
            Err(e) => {
                out.failures.push(fail("reconstruction", e));
                continue;
            }
        };
        out.reseeds.push((i, rve.attempts));
        match simulate_level(&rve.mesh, *level, &[*theta], derive_seed(seed, 100), sim) {
            Ok(curves) => {
                let x = design_point(desc, theta);
                for (t2, y) in curves[0].responses().into_iter().enumerate() {
                    out.samples.push(Sample { x, t1: *level, t2: t2 + 1, y });
                }
            }
            Err(e) => out.failures.push(fail("simulation", e)),
        }
    }
    Ok(out)
}

pub fn write_dataset_csv<W: std::io::Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    writeln!(w, "{DATASET_CSV_HEADER}")?;
    for s in samples {
        let xs: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{},{},{},{:?}", xs.join(","), s.t1, s.t2, s.y)?;
    }
    Ok(())
}

pub fn read_dataset_csv(text: &str) -> Result<Vec<Sample>> {
    let mixed = crate::lmgp::read_samples_csv(text, &dataset_spec())?;
    if text.lines().next().map(str::trim) != Some(DATASET_CSV_HEADER) {
        return Err(Error::Format("dataset header mismatch".into()));
    }
    Ok(mixed
        .into_iter()
        .map(|m| Sample {
            x: m.x.try_into().expect("six columns"),
            t1: m.t[0],
            t2: m.t[1],
            y: m.y,
        })
        .collect())
}

/// Independent GPs from descriptors to the effective Lamé constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TangentEmulator {
    pub mu: GpModel,
    pub lambda: GpModel,
}

impl TangentEmulator {
    pub fn predict(&self, d: &RveDescriptors) -> (f64, f64) {
        let x = d.as_array();
        (self.mu.predict(&x).0, self.lambda.predict(&x).0)
    }

    /// Relative prediction error over held-out `(descriptors, mu, lambda)`.
    pub fn holdout_error(&self, test: &[(RveDescriptors, f64, f64)]) -> Result<f64> {
        let preds: Vec<Vec<f64>> = test.iter().map(|(d, _, _)| {
            let (m, l) = self.predict(d);
            vec![m, l]
        }).collect();
        let truths: Vec<Vec<f64>> = test.iter().map(|(_, m, l)| vec![*m, *l]).collect();
        relative_error(&preds, &truths)
    }
}

pub fn fit_tangent_emulator(records: &[(RveDescriptors, f64, f64)], cfg: &GpConfig) -> Result<TangentEmulator> {
    if records.len() < 10 {
        return Err(Error::Fit(format!("tangent emulator needs at least 10 records, got {}", records.len())));
    }
    let x: Vec<Vec<f64>> = records.iter().map(|(d, _, _)| d.as_array().to_vec()).collect();
    let mu: Vec<f64> = records.iter().map(|r| r.1).collect();
    let lambda: Vec<f64> = records.iter().map(|r| r.2).collect();
    Ok(TangentEmulator {
        mu: fit_gp(&x, &mu, cfg)?,
        lambda: fit_gp(&x, &lambda, &GpConfig { seed: derive_seed(cfg.seed, 1), ..cfg.clone() })?,
    })
}

/// Predicted `(UTS, toughness)` in the [0, 1]-scaled response space.
pub trait ResponseEmulator {
    fn predict_responses(&self, x: &[f64; 6], level: usize) -> Result<[f64; 2]>;
}

impl ResponseEmulator for LmgpModel {
    fn predict_responses(&self, x: &[f64; 6], level: usize) -> Result<[f64; 2]> {
        Ok([
            self.predict_scaled(x, &[level, 1])?.0,
            self.predict_scaled(x, &[level, 2])?.0,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    pub starts: usize,
    pub seed: u64,
    /// Finite-difference step as a fraction of each box width.
    pub fd_step: f64,
    pub optim: OptimOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            starts: 10,
            seed: 0,
            fd_step: 1e-4,
            optim: OptimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub rve_id: usize,
    pub level: usize,
    pub alpha_hat: f64,
    pub e_cr_hat: f64,
    pub objective: f64,
    /// Objective at the reference parameters.
    pub objective_reference: f64,
    pub iterations: usize,
    pub starts: usize,
}

impl CalibrationRecord {
    pub fn params(&self) -> DamageParams {
        DamageParams::new(self.e_cr_hat, self.alpha_hat)
    }
}

/// Damage parameters for the ROM at `level` whose predicted responses best
/// match the DNS prediction at `theta_dns`.
pub fn calibrate(
    emulator: &impl ResponseEmulator,
    rve_id: usize,
    desc: &RveDescriptors,
    level: usize,
    theta_dns: &DamageParams,
    bounds: &DamageBounds,
    opts: &CalibrationOptions,
) -> Result<CalibrationRecord> {
    bounds.validate()?;
    if opts.starts == 0 {
        return Err(Error::Config("calibration needs at least one start".into()));
    }
    let target = emulator.predict_responses(&design_point(desc, theta_dns), DNS_LEVEL)?;
    let u_ref = bounds.to_unit(theta_dns);
    let theta_of = |u: &[f64]| if u == u_ref { *theta_dns } else { bounds.from_unit(u) };
    let objective = |u: &[f64]| -> Result<f64> {
        let p = emulator.predict_responses(&design_point(desc, &theta_of(u)), level)?;
        Ok((p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2))
    };
    let f_ref = objective(&u_ref)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, (rve_id as u64) << 8 | level as u64));
    let mut starts = vec![u_ref.to_vec()];
    starts.extend((1..opts.starts).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]));
    let (lo, hi) = ([0.0; 2], [1.0; 2]);
    let h = [opts.fd_step; 2];
    let (best, log) = multistart(
        |u: &[f64]| Ok((objective(u)?, fd_gradient(objective, u, &h, &lo, &hi)?)),
        &starts,
        &lo,
        &hi,
        &opts.optim,
    );
    let Some((_, best)) = best else {
        let diag: Vec<String> = log.iter().enumerate().filter_map(|(i, s)| s.result.as_ref().err().map(|e| format!("start {i}: {e}"))).collect();
        return Err(Error::Calibration(format!("every start failed: {}", diag.join("; "))));
    };
    let iterations = log.iter().filter_map(|s| s.result.as_ref().ok()).map(|r| r.iterations).sum();
    let (theta, f) = if best.f <= f_ref { (theta_of(&best.x), best.f) } else { (*theta_dns, f_ref) };
    Ok(CalibrationRecord {
        rve_id,
        level,
        alpha_hat: theta.alpha,
        e_cr_hat: theta.e_cr,
        objective: f,
        objective_reference: f_ref,
        iterations,
        starts: opts.starts,
    })
}

/// Calibration failure of one `(rve, level)` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFailure {
    pub rve_id: usize,
    pub level: usize,
    pub reason: String,
}

pub fn calibrate_all(
    emulator: &impl ResponseEmulator,
    rves: &[(usize, RveDescriptors)],
    levels: &[usize],
    theta_dns: &DamageParams,
    bounds: &DamageBounds,
    opts: &CalibrationOptions,
) -> (Vec<CalibrationRecord>, Vec<CalibrationFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, desc) in rves {
        for &level in levels {
            match calibrate(emulator, *id, desc, level, theta_dns, bounds, opts) {
                Ok(r) => records.push(r),
                Err(e) => failures.push(CalibrationFailure {
                    rve_id: *id,
                    level,
                    reason: e.to_string(),
                }),
            }
        }
    }
    (records, failures)
}

pub fn write_calibration_csv<W: std::io::Write>(mut w: W, records: &[CalibrationRecord]) -> Result<()> {
    writeln!(w, "{CALIBRATION_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{:?},{:?},{:?}", r.rve_id, r.level, r.alpha_hat, r.e_cr_hat, r.objective)?;
    }
    Ok(())
}

/// Rows of a calibration database as `(rve_id, level, alpha, e_cr, objective)`.
pub fn read_calibration_csv(text: &str) -> Result<Vec<(usize, usize, f64, f64, f64)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(CALIBRATION_CSV_HEADER) {
        return Err(Error::Format("calibration header mismatch".into()));
    }
    lines
        .map(|l| {
            let bad = || Error::Format(format!("calibration row {l:?}"));
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
                f[4].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// Relative ROM errors on UTS and toughness against DNS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub r_uts: f64,
    pub r_toughness: f64,
    pub norm: f64,
}

impl ErrorPair {
    pub fn between(rom: &ResponseCurve, dns: &ResponseCurve) -> Result<Self> {
        if dns.uts == 0.0 || dns.toughness == 0.0 {
            return Err(Error::ZeroNorm(usize::from(dns.uts != 0.0)));
        }
        let r_uts = ((rom.uts - dns.uts) / dns.uts).abs();
        let r_toughness = ((rom.toughness - dns.toughness) / dns.toughness).abs();
        Ok(ErrorPair {
            r_uts,
            r_toughness,
            norm: r_uts.hypot(r_toughness),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub rve_id: usize,
    pub level: usize,
    pub k: usize,
    pub pre: ErrorPair,
    pub post: ErrorPair,
}

/// ROM errors with the reference and with the calibrated parameters, given
/// the DNS curve at the reference parameters.
pub fn validate_against(
    mesh: &VoxelMesh,
    record: &CalibrationRecord,
    theta_dns: &DamageParams,
    dns: &ResponseCurve,
    cluster_seed: u64,
    sim: &SimConfig,
) -> Result<ValidationResult> {
    let k = sim
        .k_of(record.level)?
        .ok_or_else(|| Error::Config("validation needs a ROM level".into()))?;
    let roms = simulate_level(mesh, record.level, &[*theta_dns, record.params()], cluster_seed, sim)?;
    Ok(ValidationResult {
        rve_id: record.rve_id,
        level: record.level,
        k,
        pre: ErrorPair::between(&roms[0], dns)?,
        post: ErrorPair::between(&roms[1], dns)?,
    })
}

/// Pre- and post-calibration errors of the ROM at the record's level.
pub fn validate_calibration(
    mesh: &VoxelMesh,
    record: &CalibrationRecord,
    theta_dns: &DamageParams,
    cluster_seed: u64,
    sim: &SimConfig,
) -> Result<ValidationResult> {
    let dns = simulate_level(mesh, DNS_LEVEL, &[*theta_dns], 0, sim)?.remove(0);
    validate_against(mesh, record, theta_dns, &dns, cluster_seed, sim)
}

pub fn write_validation_csv<W: std::io::Write>(mut w: W, rows: &[ValidationResult]) -> Result<()> {
    writeln!(w, "{VALIDATION_CSV_HEADER}")?;
    for v in rows {
        writeln!(
            w,
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
            v.rve_id, v.level, v.k, v.pre.r_uts, v.pre.r_toughness, v.pre.norm, v.post.r_uts, v.post.r_toughness, v.post.norm
        )?;
    }
    Ok(())
}

/// Homogenized state history of one macro integration point driven through
/// `load` by the simulator of `level` with damage parameters `theta`.
pub fn macro_point_driver(
    mesh: &VoxelMesh,
    level: usize,
    theta: &DamageParams,
    load: &MacroLoad,
    cluster_seed: u64,
    sim: &SimConfig,
) -> Result<Vec<MacroState>> {
    theta.validate()?;
    load.validate()?;
    mesh.check_connected()?;
    let model = VoxelModel::new(mesh)?;
    let mut history = Vec::with_capacity(load.n_steps);
    match sim.k_of(level)? {
        None => solve_reference_rve_with(&model, &sim.props, load, &sim.solver, |fields| {
            history.push(stabilized_damage_post(&model, fields, theta)?.1);
            Ok(())
        })?,
        Some(k) => {
            let clustering = cluster_elements(&model, k, cluster_seed)?;
            let system = RomSystem::new(&model, &clustering, &sim.props)?;
            system.solve_with(&sim.props, load, &sim.solver, |step| {
                history.push(stabilized_damage_post(&model, &step.fields, theta)?.1);
                Ok(())
            })?
        }
    };
    Ok(history)
}

pub const MACRO_HISTORY_CSV_HEADER: &str = "step,e11,s1_11,sd_11,d_macro";

pub fn write_macro_history_csv<W: std::io::Write>(mut w: W, history: &[MacroState]) -> Result<()> {
    writeln!(w, "{MACRO_HISTORY_CSV_HEADER}")?;
    for (i, m) in history.iter().enumerate() {
        writeln!(w, "{},{:?},{:?},{:?},{:?}", i + 1, m.e_m[0], m.s1[0], m.sd[0], m.d_macro)?;
    }
    Ok(())
}

/// Strain at the first step with positive macro damage.
pub fn damage_onset_strain(history: &[MacroState]) -> Option<f64> {
    history.iter().find(|m| m.d_macro > 0.0).map(|m| m.e_m[0])
}
