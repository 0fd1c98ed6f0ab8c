mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fracal::config::PipelineConfig;
use fracal::material::DamageParams;
use fracal::Result;

use commands::Ctx;

#[derive(Parser)]
#[command(name = "fracal", version, about = "Multi-fidelity damage calibration of porous RVE reduced-order models")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun stages even when the manifest says they are current.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct and voxelize the configured number of RVEs.
    Generate,
    /// Run one RVE at one fidelity level and write its response curve.
    Simulate {
        #[arg(long)]
        fidelity: usize,
        #[arg(long)]
        rve: usize,
        /// Damage softening rate (defaults to theta_dns).
        #[arg(long, requires = "e_cr")]
        alpha: Option<f64>,
        /// Critical plastic strain (defaults to theta_dns).
        #[arg(long, requires = "alpha")]
        e_cr: Option<f64>,
    },
    /// Effective elastic tangent of every generated RVE, plus the tangent emulator.
    Condense,
    /// Build the multi-fidelity training table.
    Dataset,
    /// Fit the latent-map GP and export latent positions.
    Train,
    /// Calibrate ROM damage parameters and validate them against DNS.
    Calibrate,
    /// Drive one macro point with calibrated and reference parameters.
    Demo,
    /// Write the effective configuration to stdout.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let mut ctx = Ctx::new(cfg, cli.force)?;
    match cli.command {
        Command::Generate => commands::generate(&mut ctx),
        Command::Simulate { fidelity, rve, alpha, e_cr } => {
            let theta = alpha.zip(e_cr).map(|(a, e)| DamageParams::new(e, a));
            commands::simulate(&mut ctx, fidelity, rve, theta)
        }
        Command::Condense => commands::condense(&mut ctx),
        Command::Dataset => commands::dataset(&mut ctx),
        Command::Train => commands::train(&mut ctx),
        Command::Calibrate => commands::calibrate(&mut ctx),
        Command::Demo => commands::demo(&mut ctx),
        Command::ShowConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
