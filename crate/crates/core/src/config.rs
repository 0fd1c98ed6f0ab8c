//! Pipeline configuration document (TOML).

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationOptions, DamageBounds, DatasetConfig, SimConfig, DNS_LEVEL};
use crate::error::{Error, Result};
use crate::gp::GpConfig;
use crate::lmgp::LmgpConfig;
use crate::material::{DamageParams, MaterialProps};
use crate::microstructure::{DescriptorBounds, ReconstructionConfig};
use crate::rve_solver::{MacroLoad, SolverOptions};
use crate::util::derive_seed;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Root seed; every stage derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub theta_dns: DamageParams,
    #[serde(default)]
    pub material: MaterialProps,
    #[serde(default)]
    pub rve: RveSection,
    #[serde(default)]
    pub solver: SolverOptions,
    /// ROM cluster count per fidelity level (`"1" = 50`, ...).
    #[serde(default = "default_fidelity_map")]
    pub fidelity: BTreeMap<String, usize>,
    #[serde(default)]
    pub doe: DoeSection,
    #[serde(default)]
    pub tangent: GpConfig,
    #[serde(default)]
    pub lmgp: LmgpConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub demo: DemoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out: "out".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bounds {
    pub descriptors: DescriptorBounds,
    pub damage: DamageBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RveSection {
    pub resolution: usize,
    pub side_length: f64,
    /// Number of RVEs produced by `generate` (used for calibration and the demo).
    pub count: usize,
    /// Diagonal of the target deformation gradient.
    pub stretch: [f64; 3],
    pub n_steps: usize,
    pub max_reseeds: usize,
    pub reconstruction: ReconstructionConfig,
}

impl Default for RveSection {
    fn default() -> Self {
        RveSection {
            resolution: 24,
            side_length: 1.0,
            count: 10,
            stretch: [1.1, 0.95, 0.95],
            n_steps: 50,
            max_reseeds: 2,
            reconstruction: ReconstructionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoeSection {
    pub n_total: usize,
    /// Share of simulations per fidelity level 1..=4.
    pub proportions: [f64; 4],
}

impl Default for DoeSection {
    fn default() -> Self {
        DoeSection {
            n_total: 120,
            proportions: [0.4, 0.3, 0.2, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub levels: Vec<usize>,
    pub starts: usize,
    pub fd_step: f64,
    /// Run DNS and both ROM variants on every calibrated RVE.
    pub validate: bool,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            levels: vec![1, 2, 3],
            starts: 10,
            fd_step: 1e-4,
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub rve: usize,
    pub level: usize,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection { rve: 0, level: 1 }
    }
}

fn default_fidelity_map() -> BTreeMap<String, usize> {
    BTreeMap::from([("1".into(), 50), ("2".into(), 100), ("3".into(), 200)])
}

/// Seed streams of the pipeline stages.
pub mod stream {
    pub const DOE: u64 = 1;
    pub const GENERATE: u64 = 2;
    pub const CLUSTERING: u64 = 3;
    pub const LMGP: u64 = 4;
    pub const CALIBRATION: u64 = 5;
    pub const TANGENT: u64 = 6;
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            bounds: Bounds::default(),
            theta_dns: DamageParams::default(),
            material: MaterialProps::default(),
            rve: RveSection::default(),
            solver: SolverOptions::default(),
            fidelity: default_fidelity_map(),
            doe: DoeSection::default(),
            tangent: GpConfig::default(),
            lmgp: LmgpConfig::default(),
            calibration: CalibrationSection::default(),
            demo: DemoSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("version: expected {CONFIG_VERSION}, got {}", self.version)));
        }
        self.bounds.descriptors.validate()?;
        self.bounds.damage.validate()?;
        self.theta_dns.validate()?;
        if !self.bounds.damage.contains(&self.theta_dns) {
            return Err(Error::Config("theta_dns lies outside bounds.damage".into()));
        }
        if self.rve.resolution < 8 {
            return Err(Error::Config(format!("rve.resolution: must be at least 8, got {}", self.rve.resolution)));
        }
        if !(self.rve.side_length > 0.0) {
            return Err(Error::Config("rve.side_length: must be positive".into()));
        }
        if self.rve.count == 0 {
            return Err(Error::Config("rve.count: must be positive".into()));
        }
        self.fidelity_map()?;
        self.sim()?.validate()?;
        crate::calibration::allocate_levels(self.doe.n_total, &self.doe.proportions)
            .map_err(|e| Error::Config(format!("doe.proportions: {e}")))?;
        self.tangent.validate()?;
        self.lmgp.validate(&crate::calibration::dataset_spec())?;
        if self.calibration.starts == 0 || !(self.calibration.fd_step > 0.0 && self.calibration.fd_step < 0.5) {
            return Err(Error::Config("calibration: starts must be positive and fd_step in (0, 0.5)".into()));
        }
        let fid = self.fidelity_map()?;
        for l in &self.calibration.levels {
            if !fid.contains_key(l) {
                return Err(Error::Config(format!("calibration.levels: level {l} has no fidelity entry")));
            }
        }
        if self.demo.rve >= self.rve.count {
            return Err(Error::Config(format!("demo.rve: {} exceeds rve.count {}", self.demo.rve, self.rve.count)));
        }
        if self.demo.level != DNS_LEVEL && !fid.contains_key(&self.demo.level) {
            return Err(Error::Config(format!("demo.level: unknown level {}", self.demo.level)));
        }
        Ok(())
    }

    pub fn fidelity_map(&self) -> Result<BTreeMap<usize, usize>> {
        self.fidelity
            .iter()
            .map(|(k, &v)| {
                let level: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("fidelity: key {k:?} is not a level number")))?;
                if level == 0 || level >= DNS_LEVEL {
                    return Err(Error::Config(format!("fidelity: level {level} must be in 1..=3")));
                }
                if v == 0 {
                    return Err(Error::Config(format!("fidelity.{k}: cluster count must be positive")));
                }
                Ok((level, v))
            })
            .collect()
    }

    pub fn load_path(&self) -> Result<MacroLoad> {
        MacroLoad::new(
            Matrix3::from_diagonal(&Vector3::from(self.rve.stretch)),
            self.rve.n_steps,
        )
    }

    pub fn sim(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            resolution: self.rve.resolution,
            props: self.material.clone(),
            load: self.load_path()?,
            solver: self.solver,
            reconstruction: ReconstructionConfig {
                side_length: self.rve.side_length,
                ..self.rve.reconstruction
            },
            fidelity: self.fidelity_map()?,
            max_reseeds: self.rve.max_reseeds,
        })
    }

    pub fn stage_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            n_total: self.doe.n_total,
            proportions: self.doe.proportions,
            seed: self.stage_seed(stream::DOE),
        }
    }

    /// LMGP settings for the dataset; responses are always scaled per `t2`.
    pub fn lmgp_config(&self) -> LmgpConfig {
        LmgpConfig {
            seed: self.stage_seed(stream::LMGP),
            scale_by: Some(1),
            ..self.lmgp.clone()
        }
    }

    pub fn tangent_config(&self) -> GpConfig {
        GpConfig {
            seed: self.stage_seed(stream::TANGENT),
            ..self.tangent.clone()
        }
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            starts: self.calibration.starts,
            seed: self.stage_seed(stream::CALIBRATION),
            fd_step: self.calibration.fd_step,
            ..Default::default()
        }
    }
}
