use std::collections::BTreeMap;

use fracal::calibration::{
    build_dataset, calibrate_all, dataset_spec, fit_tangent_emulator, generate_rves, macro_point_driver,
    read_calibration_csv, read_dataset_csv, simulate_level, validate_against, write_calibration_csv,
    write_dataset_csv, write_macro_history_csv, write_validation_csv, CalibrationFailure, DNS_LEVEL,
};
use fracal::condensation::{effective_tangent, read_tangent_csv, write_tangent_csv};
use fracal::config::{stream, PipelineConfig};
use fracal::lmgp::{fit_lmgp, LmgpModel};
use fracal::material::DamageParams;
use fracal::microstructure::{read_descriptor_csv, write_descriptor_csv, RveDescriptors, VoxelMesh};
use fracal::util::derive_seed;
use fracal::{Error, Result};
use serde::Serialize;

use crate::manifest::{combine_hash, sha256_hex, Workspace};

pub const DESCRIPTORS: &str = "descriptors.csv";
pub const TANGENTS: &str = "tangents.csv";
pub const TANGENT_MODEL: &str = "tangent_gp.json";
pub const DATASET: &str = "dataset.csv";
pub const DATASET_LOG: &str = "dataset_failures.json";
pub const LMGP_MODEL: &str = "lmgp.json";
pub const LATENT: &str = "latent.csv";
pub const CALIBRATION: &str = "calibration.csv";
pub const CALIBRATION_LOG: &str = "calibration_failures.json";
pub const VALIDATION: &str = "validation.csv";
pub const DEMO_HISTORY: &str = "demo/macro_history.csv";
pub const DEMO_COMPARISON: &str = "demo/comparison.csv";
pub const DEMO_COMPARISON_HEADER: &str = "step,strain,sd_dns,sd_rom_pre,sd_rom_post,d_dns,d_rom_pre,d_rom_post";

pub fn mesh_path(id: usize) -> String {
    format!("rves/rve_{id:03}.vox")
}

pub fn simulate_path(id: usize, level: usize) -> String {
    format!("simulate/rve_{id:03}_L{level}.csv")
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub ws: Workspace,
    pub force: bool,
    config_hash: String,
}

type StageOutput = (Vec<String>, BTreeMap<String, String>);

impl Ctx {
    pub fn new(cfg: PipelineConfig, force: bool) -> Result<Self> {
        let ws = Workspace::open(std::path::Path::new(&cfg.paths.out))?;
        let mut hashed = cfg.clone();
        hashed.paths.out.clear();
        let config_hash = sha256_hex(hashed.to_toml()?.as_bytes());
        Ok(Ctx {
            cfg,
            ws,
            force,
            config_hash,
        })
    }

    fn stage(
        &mut self,
        name: &str,
        upstream: &[&str],
        extra: &[(&str, &str)],
        body: impl FnOnce(&mut Self) -> Result<StageOutput>,
    ) -> Result<()> {
        let mut parts: Vec<(String, String)> = vec![("stage".into(), name.into()), ("config".into(), self.config_hash.clone())];
        for u in upstream {
            parts.push((format!("upstream:{u}"), self.ws.stage_fingerprint(u)?));
        }
        parts.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        let refs: Vec<(&str, &str)> = parts.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let input_hash = combine_hash(&refs);
        if !self.force && self.ws.is_current(name, &input_hash) {
            eprintln!("{name}: up to date");
            return Ok(());
        }
        let (outputs, notes) = body(self)?;
        self.ws.record(name, input_hash, &outputs, notes)?;
        eprintln!("{name}: wrote {}", outputs.join(", "));
        Ok(())
    }

    fn cluster_seed(&self, rve: usize) -> u64 {
        derive_seed(self.cfg.stage_seed(stream::CLUSTERING), rve as u64)
    }

    fn read(&self, rel: &str) -> Result<String> {
        std::fs::read_to_string(self.ws.path(rel))
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", self.ws.path(rel).display())))
    }

    fn rves(&self) -> Result<Vec<RveDescriptors>> {
        Ok(read_descriptor_csv(&self.read(DESCRIPTORS)?)?.into_iter().map(|(d, _)| d).collect())
    }

    fn mesh(&self, id: usize) -> Result<VoxelMesh> {
        let n = self.rves()?.len();
        if id >= n {
            return Err(Error::Config(format!("unknown rve id {id} ({n} generated)")));
        }
        let f = std::fs::File::open(self.ws.path(&mesh_path(id)))?;
        VoxelMesh::read_from(std::io::BufReader::new(f))
    }
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn generate(ctx: &mut Ctx) -> Result<()> {
    ctx.stage("generate", &[], &[], |ctx| {
        let cfg = &ctx.cfg;
        let (rves, skipped) = generate_rves(
            cfg.rve.count,
            &cfg.bounds.descriptors,
            cfg.stage_seed(stream::GENERATE),
            &cfg.sim()?,
        )?;
        let mut outputs = Vec::new();
        for (i, r) in rves.iter().enumerate() {
            let mut buf = Vec::new();
            r.mesh.write_to(&mut buf)?;
            ctx.ws.write(&mesh_path(i), &buf)?;
            outputs.push(mesh_path(i));
        }
        let rows: Vec<(RveDescriptors, u64)> = rves.iter().map(|r| (r.descriptors, r.seed)).collect();
        ctx.ws.write(DESCRIPTORS, &csv_bytes(|b| write_descriptor_csv(b, &rows))?)?;
        outputs.push(DESCRIPTORS.into());
        let notes = BTreeMap::from([
            ("meshes".into(), rves.len().to_string()),
            ("skipped_draws".into(), skipped.len().to_string()),
        ]);
        if !skipped.is_empty() {
            ctx.ws.write("generate_skipped.json", &json(&skipped)?)?;
            outputs.push("generate_skipped.json".into());
        }
        Ok((outputs, notes))
    })
}

pub fn simulate(ctx: &mut Ctx, level: usize, rve: usize, theta: Option<DamageParams>) -> Result<()> {
    if !(1..=DNS_LEVEL).contains(&level) {
        return Err(Error::Config(format!("fidelity must be in 1..=4, got {level}")));
    }
    let theta = theta.unwrap_or(ctx.cfg.theta_dns);
    theta.validate()?;
    let name = format!("simulate:rve{rve:03}:L{level}");
    let theta_key = format!("{:?},{:?}", theta.alpha, theta.e_cr);
    ctx.stage(&name, &["generate"], &[("theta", &theta_key)], |ctx| {
        let mesh = ctx.mesh(rve)?;
        let sim = ctx.cfg.sim()?;
        let curve = simulate_level(&mesh, level, &[theta], ctx.cluster_seed(rve), &sim)?.remove(0);
        let rel = simulate_path(rve, level);
        ctx.ws.write(&rel, &csv_bytes(|b| curve.write_csv(b))?)?;
        let solver = match sim.k_of(level)? {
            None => "dns".to_string(),
            Some(k) => format!("rom k={k}"),
        };
        Ok((vec![rel], BTreeMap::from([("solver".into(), solver)])))
    })
}

pub fn condense(ctx: &mut Ctx) -> Result<()> {
    ctx.stage("condense", &["generate"], &[], |ctx| {
        let rves = ctx.rves()?;
        let mut rows = Vec::with_capacity(rves.len());
        for (i, d) in rves.iter().enumerate() {
            rows.push((*d, effective_tangent(&ctx.mesh(i)?, &ctx.cfg.material)?));
        }
        ctx.ws.write(TANGENTS, &csv_bytes(|b| write_tangent_csv(b, &rows))?)?;
        let mut outputs = vec![TANGENTS.to_string()];
        let mut notes = BTreeMap::new();
        let records: Vec<(RveDescriptors, f64, f64)> = read_tangent_csv(&ctx.read(TANGENTS)?)?
            .into_iter()
            .map(|(d, mu, l, _)| (d, mu, l))
            .collect();
        if records.len() >= 10 {
            let emu = fit_tangent_emulator(&records, &ctx.cfg.tangent_config())?;
            ctx.ws.write(TANGENT_MODEL, &json(&emu)?)?;
            outputs.push(TANGENT_MODEL.into());
        } else {
            notes.insert("emulator".into(), format!("skipped: {} records, need 10", records.len()));
        }
        Ok((outputs, notes))
    })
}

pub fn dataset(ctx: &mut Ctx) -> Result<()> {
    ctx.stage("dataset", &[], &[], |ctx| {
        let cfg = &ctx.cfg;
        let ds = build_dataset(&cfg.dataset(), &cfg.bounds.descriptors, &cfg.bounds.damage, &cfg.sim()?, |i, n| {
            eprintln!("dataset: simulation {}/{n}", i + 1)
        })?;
        if ds.samples.is_empty() {
            return Err(Error::Fit("every dataset simulation failed".into()));
        }
        ctx.ws.write(DATASET, &csv_bytes(|b| write_dataset_csv(b, &ds.samples))?)?;
        #[derive(Serialize)]
        struct Log<'a> {
            failures: &'a [fracal::calibration::FailureRecord],
            reconstruction_attempts: &'a [(usize, usize)],
        }
        ctx.ws.write(DATASET_LOG, &json(&Log {
            failures: &ds.failures,
            reconstruction_attempts: &ds.reseeds,
        })?)?;
        let notes = BTreeMap::from([
            ("rows".into(), ds.samples.len().to_string()),
            ("failed_samples".into(), ds.failures.len().to_string()),
        ]);
        Ok((vec![DATASET.into(), DATASET_LOG.into()], notes))
    })
}

pub fn train(ctx: &mut Ctx) -> Result<()> {
    ctx.stage("train", &["dataset"], &[], |ctx| {
        let samples: Vec<_> = read_dataset_csv(&ctx.read(DATASET)?)?.iter().map(|s| s.to_mixed()).collect();
        let model = fit_lmgp(&samples, &dataset_spec(), &ctx.cfg.lmgp_config())?;
        ctx.ws.write(LMGP_MODEL, model.to_json()?.as_bytes())?;
        ctx.ws.write(LATENT, &csv_bytes(|b| model.write_latent_csv(b))?)?;
        let notes = BTreeMap::from([("latent_points".into(), model.combos.len().to_string())]);
        Ok((vec![LMGP_MODEL.into(), LATENT.into()], notes))
    })
}

pub fn calibrate(ctx: &mut Ctx) -> Result<()> {
    ctx.stage("calibrate", &["generate", "train"], &[], |ctx| {
        let model = LmgpModel::from_json(&ctx.read(LMGP_MODEL)?)?;
        let rves: Vec<(usize, RveDescriptors)> = ctx.rves()?.into_iter().enumerate().collect();
        let cfg = &ctx.cfg;
        let theta = cfg.theta_dns;
        let (records, mut failures) = calibrate_all(
            &model,
            &rves,
            &cfg.calibration.levels,
            &theta,
            &cfg.bounds.damage,
            &cfg.calibration_options(),
        );
        if records.is_empty() {
            let reasons: Vec<&str> = failures.iter().map(|f| f.reason.as_str()).collect();
            return Err(Error::Calibration(format!("no entry calibrated: {reasons:?}")));
        }
        ctx.ws.write(CALIBRATION, &csv_bytes(|b| write_calibration_csv(b, &records))?)?;
        let mut outputs = vec![CALIBRATION.to_string()];
        if cfg.calibration.validate {
            let sim = cfg.sim()?;
            let mut rows = Vec::new();
            for (id, _) in &rves {
                let mine: Vec<_> = records.iter().filter(|r| r.rve_id == *id).collect();
                if mine.is_empty() {
                    continue;
                }
                eprintln!("calibrate: validating rve {id}");
                let mesh = ctx.mesh(*id)?;
                let dns = match simulate_level(&mesh, DNS_LEVEL, &[theta], 0, &sim) {
                    Ok(mut c) => c.remove(0),
                    Err(e) => {
                        failures.extend(mine.iter().map(|r| CalibrationFailure {
                            rve_id: *id,
                            level: r.level,
                            reason: format!("validation: {e}"),
                        }));
                        continue;
                    }
                };
                for r in mine {
                    match validate_against(&mesh, r, &theta, &dns, ctx.cluster_seed(*id), &sim) {
                        Ok(v) => rows.push(v),
                        Err(e) => failures.push(CalibrationFailure {
                            rve_id: *id,
                            level: r.level,
                            reason: format!("validation: {e}"),
                        }),
                    }
                }
            }
            ctx.ws.write(VALIDATION, &csv_bytes(|b| write_validation_csv(b, &rows))?)?;
            outputs.push(VALIDATION.into());
        }
        ctx.ws.write(CALIBRATION_LOG, &json(&failures)?)?;
        outputs.push(CALIBRATION_LOG.into());
        let notes = BTreeMap::from([
            ("records".into(), records.len().to_string()),
            ("failures".into(), failures.len().to_string()),
        ]);
        Ok((outputs, notes))
    })
}

pub fn demo(ctx: &mut Ctx) -> Result<()> {
    ctx.stage("demo", &["generate", "calibrate"], &[], |ctx| {
        let cfg = &ctx.cfg;
        let (rve, level) = (cfg.demo.rve, cfg.demo.level);
        let theta = cfg.theta_dns;
        let calibrated = if level == DNS_LEVEL {
            theta
        } else {
            let rows = read_calibration_csv(&ctx.read(CALIBRATION)?)?;
            let (_, _, alpha, e_cr, _) = rows
                .into_iter()
                .find(|r| r.0 == rve && r.1 == level)
                .ok_or_else(|| Error::Config(format!("no calibration record for rve {rve} at level {level}")))?;
            DamageParams::new(e_cr, alpha)
        };
        let mesh = ctx.mesh(rve)?;
        let sim = cfg.sim()?;
        let seed = ctx.cluster_seed(rve);
        eprintln!("demo: rom with calibrated parameters");
        let post = macro_point_driver(&mesh, level, &calibrated, &sim.load, seed, &sim)?;
        eprintln!("demo: rom with reference parameters");
        let pre = macro_point_driver(&mesh, level, &theta, &sim.load, seed, &sim)?;
        eprintln!("demo: dns");
        let dns = macro_point_driver(&mesh, DNS_LEVEL, &theta, &sim.load, seed, &sim)?;
        ctx.ws.write(DEMO_HISTORY, &csv_bytes(|b| write_macro_history_csv(b, &post))?)?;
        let comparison = csv_bytes(|b| {
            use std::io::Write;
            writeln!(b, "{DEMO_COMPARISON_HEADER}")?;
            for (i, ((d, a), p)) in dns.iter().zip(&pre).zip(&post).enumerate() {
                writeln!(
                    b,
                    "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                    i + 1,
                    d.e_m[0],
                    d.sd[0],
                    a.sd[0],
                    p.sd[0],
                    d.d_macro,
                    a.d_macro,
                    p.d_macro
                )?;
            }
            Ok(())
        })?;
        ctx.ws.write(DEMO_COMPARISON, &comparison)?;
        let notes = BTreeMap::from([
            ("alpha".into(), format!("{:?}", calibrated.alpha)),
            ("e_cr".into(), format!("{:?}", calibrated.e_cr)),
        ]);
        Ok((vec![DEMO_HISTORY.into(), DEMO_COMPARISON.into()], notes))
    })
}
